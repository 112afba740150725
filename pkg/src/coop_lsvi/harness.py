"""Episode loop orchestrating environment, agents, server, and protocol.

A run is strictly sequential: one active agent per episode. Determinism is
enforced by deriving every random stream from (master_seed, episode, stream
tag) through a 64-bit avalanche mix, so trajectories are invariant to
diagnostic toggles and evaluation rollouts never perturb learning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import mdp as mdp_mod
from .agent import LsviAgent, Transition, practical_beta, theoretical_beta
from .mdp import LinearMdp, PlannerOutput
from .psdmat import PsdMatrix
from .schedules import lower_bound_schedule, make_initial_states, make_schedule
from .server import CentralServer, Decision, ProtocolKind, protocol_decide

_MASK64 = (1 << 64) - 1

# Stream tags: trajectory sampling, evaluation rollouts, participation
# schedule, initial-state schedule.
TAG_TRAJECTORY = 0xA1
TAG_EVAL = 0xA2
TAG_SCHEDULE = 0xA3
TAG_INIT = 0xA4


def mix_seed(master: int, *streams: int) -> int:
    """Chain the splitmix64 finalizer over (master, streams...)."""
    z = master & _MASK64
    for s in streams:
        z = (z + 0x9E3779B97F4A7C15 + (s & _MASK64)) & _MASK64
        z ^= z >> 30
        z = (z * 0xBF58476D1CE4E5B9) & _MASK64
        z ^= z >> 27
        z = (z * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
    return z


class ConfigError(ValueError):
    """A run configuration violates its constraints."""

    def __init__(self, msg: str, key: Optional[tuple[str, str]] = None):
        super().__init__(msg)
        self.key = key


@dataclass
class RunConfig:
    """Complete description of one simulation run.

    Optional fields default per the documented rules when resolved():
    alpha = 1/M^2, hard-instance gap = min(1/4, sqrt(d*M/(8K))), initial-state
    schedule "epoch" for hard instances and "fixed" otherwise, and schedule
    seeds derived from master_seed.
    """

    mdp_kind: str = "hard"                 # hard | random | file
    mdp_d: int = 8
    mdp_horizon: int = 3
    mdp_gap: Optional[float] = None
    mdp_n_states: int = 4
    mdp_n_actions: int = 2
    mdp_seed: int = 0
    mdp_path: Optional[str] = None

    M: int = 1
    K: int = 1000
    alpha: Optional[float] = None
    ridge: float = 1.0
    delta: float = 0.01
    beta_mode: str = "practical"           # practical | theoretical | fixed
    beta_value: Optional[float] = None
    protocol: str = "async_trigger"
    master_seed: int = 0
    eval_mode: str = "exact"               # exact | monte_carlo | off
    eval_rollouts: int = 200
    diagnostics: bool = False

    schedule: str = "round_robin"
    schedule_seed: Optional[int] = None
    schedule_block: int = 10
    schedule_agent: int = 1

    init_state: Optional[str] = None       # fixed | uniform_random | epoch
    init_state_fixed: int = 0

    def validate(self) -> None:
        def bad(msg, key):
            raise ConfigError(msg, key)

        if self.mdp_kind not in ("hard", "random", "file"):
            bad(f"unknown mdp kind {self.mdp_kind!r}", ("mdp", "kind"))
        if self.mdp_kind == "file" and not self.mdp_path:
            bad("mdp kind 'file' requires a path", ("mdp", "path"))
        if self.K < 1:
            bad(f"K must be >= 1, got {self.K}", ("run", "K"))
        if self.M < 1:
            bad(f"M must be >= 1, got {self.M}", ("run", "M"))
        if self.alpha is not None and not self.alpha > 0:
            bad(f"alpha must be > 0, got {self.alpha}", ("run", "alpha"))
        if not self.ridge > 0:
            bad(f"ridge must be > 0, got {self.ridge}", ("run", "ridge"))
        if not 0 < self.delta < 1:
            bad(f"delta must lie in (0,1), got {self.delta}", ("run", "delta"))
        if self.beta_mode not in ("practical", "theoretical", "fixed"):
            bad(f"unknown beta mode {self.beta_mode!r}", ("run", "beta"))
        if self.beta_mode == "fixed" and self.beta_value is None:
            bad("beta mode 'fixed' requires a value", ("run", "beta"))
        if self.protocol not in [p.value for p in ProtocolKind]:
            bad(f"unknown protocol {self.protocol!r}", ("run", "protocol"))
        if self.eval_mode not in ("exact", "monte_carlo", "off"):
            bad(f"unknown eval mode {self.eval_mode!r}", ("run", "eval"))
        if self.eval_mode == "monte_carlo" and self.eval_rollouts < 1:
            bad("monte_carlo eval needs >= 1 rollouts", ("run", "eval"))
        if self.schedule not in ("round_robin", "uniform_random", "bursty",
                                 "single_agent", "lower_bound"):
            bad(f"unknown schedule {self.schedule!r}", ("schedule", "kind"))
        if self.schedule == "single_agent" and not 1 <= self.schedule_agent <= self.M:
            bad(f"schedule agent {self.schedule_agent} out of [1, {self.M}]",
                ("schedule", "agent"))
        if self.init_state not in (None, "fixed", "uniform_random", "epoch"):
            bad(f"unknown init-state schedule {self.init_state!r}", ("init_state", "kind"))
        if self.init_state == "epoch" and self.mdp_kind != "hard":
            bad("epoch initial-state schedule requires the hard instance",
                ("init_state", "kind"))

    def resolved(self) -> "RunConfig":
        """Fill every defaulted field; the result echoes and reruns exactly."""
        self.validate()
        out = replace(self)
        if out.alpha is None:
            out.alpha = 1.0 / (out.M * out.M)
        if out.mdp_kind == "hard" and out.mdp_gap is None:
            out.mdp_gap = mdp_mod.default_hard_gap(out.mdp_d, out.M, out.K)
        if out.beta_value is None:
            out.beta_value = 0.1 if out.beta_mode == "practical" else 1.0
        if out.init_state is None:
            out.init_state = "epoch" if out.mdp_kind == "hard" else "fixed"
        if out.schedule in ("uniform_random", "bursty") and out.schedule_seed is None:
            out.schedule_seed = mix_seed(out.master_seed, TAG_SCHEDULE)
        out.validate()
        return out


@dataclass
class RunRecord:
    """Per-episode metrics stream plus end-of-run summary quantities.

    Regret increments are stored raw (possibly negative); nothing is clamped.
    Diagnostic arrays are None when diagnostics were off.
    """

    k: np.ndarray
    m: np.ndarray
    regret_inc: np.ndarray
    cum_regret: np.ndarray
    triggered: np.ndarray
    trigger_h: np.ndarray
    cum_comm: np.ndarray
    cum_switch: np.ndarray
    agent_logdet: Optional[np.ndarray] = None      # (K, H), active agent, episode end
    all_logdet: Optional[np.ndarray] = None        # (K, H), universal cov, episode start
    optimism_slack: Optional[np.ndarray] = None    # (K,), min over visited (s,a,h)
    epoch_starts: Optional[list[int]] = None

    @property
    def total_regret(self) -> float:
        return float(self.cum_regret[-1]) if len(self.k) else 0.0

    @property
    def total_comm(self) -> int:
        return int(self.cum_comm[-1]) if len(self.k) else 0

    @property
    def total_switches(self) -> int:
        return int(self.cum_switch[-1]) if len(self.k) else 0


METRICS_HEADER = "k,m_k,regret_inc,cum_regret,triggered,trigger_h,cum_comm,cum_switch"


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def metrics_csv_text(record: RunRecord) -> str:
    lines = [METRICS_HEADER]
    for i in range(len(record.k)):
        lines.append(",".join((
            str(int(record.k[i])),
            str(int(record.m[i])),
            _g17(record.regret_inc[i]),
            _g17(record.cum_regret[i]),
            "1" if record.triggered[i] else "0",
            str(int(record.trigger_h[i])),
            str(int(record.cum_comm[i])),
            str(int(record.cum_switch[i])),
        )))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Diagnostics helpers


def epoch_boundaries(all_logdet: np.ndarray, ridge: float, d: int) -> list[int]:
    """First episode at which the universal logdet crosses each doubling.

    Boundary i is the smallest 1-based k whose beginning-of-episode logdet at
    any step reaches i*log(2) + d*log(ridge); the list ends at the last
    threshold any episode reaches.
    """
    if all_logdet.shape[0] == 0:
        return [1]
    peak = all_logdet.max(axis=1)
    base = d * math.log(ridge)
    out = []
    i = 0
    k_from = 0
    while True:
        threshold = i * math.log(2.0) + base
        idx = np.argmax(peak[k_from:] >= threshold) + k_from
        if peak[idx] < threshold:
            break
        out.append(int(idx) + 1)
        k_from = int(idx)
        i += 1
    return out


def count_nonempty_epochs(boundaries: list[int], K: int) -> int:
    """Number of epochs [K_i, K_{i+1}) that contain at least one episode."""
    n = 0
    for i, start in enumerate(boundaries):
        end = boundaries[i + 1] if i + 1 < len(boundaries) else K + 1
        if end > start:
            n += 1
    return n


def per_epoch_counts(boundaries: list[int], event_episodes: np.ndarray, K: int) -> list[int]:
    """How many of the given 1-based episodes fall in each epoch."""
    out = []
    for i, start in enumerate(boundaries):
        end = boundaries[i + 1] if i + 1 < len(boundaries) else K + 1
        out.append(int(np.sum((event_episodes >= start) & (event_episodes < end))))
    return out


def comm_complexity_scale(d: int, H: int, M: int, alpha: float, K: int, ridge: float) -> float:
    """The d*H*(M + 1/alpha)*log(1 + K/(ridge*d)) communication scale."""
    return d * H * (M + 1.0 / alpha) * math.log(1.0 + K / (ridge * d))


# ---------------------------------------------------------------------------
# The run loop


class _AgentTables:
    """Cached greedy policy / value / Q tables, valid while parameters are frozen."""

    __slots__ = ("policy", "value", "q")

    def __init__(self, agent: LsviAgent, mdp: LinearMdp,
                 want_value: bool):
        H, S = agent.H, mdp.n_states
        self.q = np.empty((H, S, mdp.n_actions))
        self.policy = np.empty((H, S), dtype=np.int64)
        for hh in range(H):
            for s in range(S):
                vals = agent.action_values(mdp, s, hh + 1)
                self.q[hh, s] = vals
                self.policy[hh, s] = int(np.argmax(vals))
        self.value = mdp_mod.eval_policy(mdp, self.policy) if want_value else None


@dataclass
class RunState:
    """Everything a single run owns; built once, then driven episode by episode."""

    config: RunConfig
    mdp: LinearMdp
    planner: Optional[PlannerOutput]
    agents: list[LsviAgent]
    server: CentralServer
    protocol: ProtocolKind
    schedule: np.ndarray
    init_states: np.ndarray
    beta: float
    tables: list[Optional[_AgentTables]] = field(default_factory=list)
    all_cov: Optional[list[PsdMatrix]] = None
    cum_comm: int = 0
    cum_switch: int = 0

    def agent_tables(self, m: int) -> _AgentTables:
        idx = m - 1
        if self.tables[idx] is None:
            self.tables[idx] = _AgentTables(
                self.agents[idx], self.mdp,
                want_value=self.config.eval_mode == "exact")
        return self.tables[idx]


@dataclass
class EpisodeView:
    """Read-only view handed to diagnostic hooks after each episode."""

    k: int
    m: int
    mdp: LinearMdp
    agent: LsviAgent
    agents: list[LsviAgent]
    server: CentralServer
    triggered: bool
    trigger_h: Optional[int]
    decision: Decision
    transitions: list[Transition]


class EpisodeResult(NamedTuple):
    """Metrics produced by one episode of the run loop."""

    m: int
    regret_inc: float
    triggered: bool
    trigger_h: int
    view: EpisodeView
    all_logdet_row: Optional[np.ndarray]
    agent_logdet_row: Optional[np.ndarray]
    optimism_slack: float


def resolve_beta(cfg: RunConfig, d: int, H: int) -> float:
    if cfg.beta_mode == "fixed":
        return float(cfg.beta_value)
    if cfg.beta_mode == "practical":
        return practical_beta(d, H, cfg.K, cfg.delta, c=cfg.beta_value)
    return theoretical_beta(d, H, cfg.M, cfg.K, cfg.alpha, cfg.ridge,
                            cfg.delta, c_beta=cfg.beta_value)


def build_mdp(cfg: RunConfig) -> LinearMdp:
    if cfg.mdp_kind == "hard":
        return mdp_mod.hard_instance(cfg.mdp_d, cfg.mdp_horizon, cfg.mdp_gap)
    if cfg.mdp_kind == "random":
        return mdp_mod.random_tabular(cfg.mdp_seed, cfg.mdp_n_states,
                                      cfg.mdp_n_actions, cfg.mdp_horizon)
    return mdp_mod.read_mdp(cfg.mdp_path)


def build_run_state(cfg: RunConfig) -> RunState:
    cfg = cfg.resolved()
    mdp = build_mdp(cfg)
    needs_planner = cfg.eval_mode != "off" or cfg.diagnostics
    planner = mdp_mod.value_iteration(mdp) if (needs_planner and mdp.is_tabular) else None
    if cfg.eval_mode in ("exact", "monte_carlo") and planner is None:
        raise ConfigError("regret evaluation requires tabular backing", ("run", "eval"))
    beta = resolve_beta(cfg, mdp.d, mdp.H)
    agents = [LsviAgent(m, mdp.d, mdp.H, cfg.alpha, cfg.ridge, beta)
              for m in range(1, cfg.M + 1)]
    server = CentralServer(mdp.d, mdp.H, cfg.ridge)
    if cfg.schedule == "lower_bound":
        schedule = lower_bound_schedule(mdp.d, cfg.M, cfg.K)
    else:
        schedule = make_schedule(cfg.schedule, cfg.M, cfg.K, seed=cfg.schedule_seed,
                                 block_len=cfg.schedule_block, agent=cfg.schedule_agent)
    init_states = make_initial_states(
        cfg.init_state, cfg.K, mdp.n_states,
        fixed=cfg.init_state_fixed,
        seed=mix_seed(cfg.master_seed, TAG_INIT),
        epoch_d=mdp.d, n_initial=mdp_mod.hard_num_initial_states(mdp)
        if cfg.mdp_kind == "hard" else None)
    state = RunState(config=cfg, mdp=mdp, planner=planner, agents=agents,
                     server=server, protocol=ProtocolKind(cfg.protocol),
                     schedule=schedule, init_states=init_states, beta=beta)
    state.tables = [None] * cfg.M
    if cfg.diagnostics:
        state.all_cov = [PsdMatrix(mdp.d, cfg.ridge) for _ in range(mdp.H)]
    return state


def _mc_policy_value(state: RunState, tables: _AgentTables, s1: int,
                     k: int) -> float:
    rng = np.random.default_rng(mix_seed(state.config.master_seed, k, TAG_EVAL))
    mdp, H = state.mdp, state.mdp.H
    total = 0.0
    for _ in range(state.config.eval_rollouts):
        s = s1
        for h in range(1, H + 1):
            r, s = mdp.step(s, int(tables.policy[h - 1, s]), h, rng)
            total += r
    return total / state.config.eval_rollouts


def run_episode(state: RunState, k: int, rng: np.random.Generator):
    """Run episode k end to end and return its EpisodeResult.

    The active agent acts greedily for h = 1..H under its frozen parameters,
    accumulates the trajectory locally, then the protocol decides whether it
    communicates (upload, download, backward update, local reset). The regret
    increment compares the optimal value at the initial state against the
    exact (or Monte Carlo) value of the pre-episode greedy policy.
    """
    cfg = state.config
    mdp = state.mdp
    m = int(state.schedule[k - 1])
    agent = state.agents[m - 1]
    s1 = int(state.init_states[k - 1])
    tables = state.agent_tables(m)

    if cfg.eval_mode == "exact":
        regret_inc = float(state.planner.v_star[0, s1] - tables.value[0, s1])
    elif cfg.eval_mode == "monte_carlo":
        regret_inc = float(state.planner.v_star[0, s1]
                           - _mc_policy_value(state, tables, s1, k))
    else:
        regret_inc = float("nan")

    diag = cfg.diagnostics
    all_logdet_row = None
    if diag and state.all_cov is not None:
        all_logdet_row = np.array([c.logdet for c in state.all_cov])

    optimism_slack = math.inf
    transitions = []
    s = s1
    for h in range(1, mdp.H + 1):
        a = int(tables.policy[h - 1, s])
        r, s_next = mdp.step(s, a, h, rng)
        t = Transition(episode=k, step=h, state=s, action=a, reward=r,
                       next_state=s_next)
        agent.record_transition(mdp, t)
        transitions.append(t)
        if diag:
            if state.all_cov is not None:
                state.all_cov[h - 1].rank_one_update(mdp.features[s, a])
            if state.planner is not None:
                slack = tables.q[h - 1, s, a] - state.planner.q_star[h - 1, s, a]
                optimism_slack = min(optimism_slack, float(slack))
        s = s_next

    trig, trig_h = agent.should_communicate()
    decision = protocol_decide(state.protocol, trig)
    if decision is Decision.COMMUNICATE:
        state.server.upload(agent)
        covs, data = state.server.download(agent)
        agent.lsvi_backward_update(mdp, data, covs)
        agent.reset_local()
        agent.last_update_episode = k
        state.tables[m - 1] = None
        state.cum_comm += 1
        state.cum_switch += 1
    elif decision is Decision.LOCAL_UPDATE:
        covs = agent.local_cov_snapshot()
        data = agent.own_history()
        agent.lsvi_backward_update(mdp, data, covs)
        agent.reset_local()
        agent.last_update_episode = k
        state.tables[m - 1] = None
        state.cum_switch += 1
    elif decision is Decision.SYNC_ALL:
        for other in state.agents:
            state.server.upload(other)
        for other in state.agents:
            covs, data = state.server.download(other)
            other.lsvi_backward_update(mdp, data, covs)
            other.reset_local()
            other.last_update_episode = k
        state.tables = [None] * cfg.M
        state.cum_comm += cfg.M
        state.cum_switch += cfg.M
    agent.episodes_seen += 1

    agent_logdet_row = None
    if diag:
        agent_logdet_row = np.array([c.logdet for c in agent.qparams.cov])
    view = EpisodeView(k=k, m=m, mdp=mdp, agent=agent, agents=state.agents,
                       server=state.server, triggered=trig, trigger_h=trig_h,
                       decision=decision, transitions=transitions)
    return EpisodeResult(
        m=m, regret_inc=regret_inc, triggered=trig, trigger_h=trig_h or 0,
        view=view, all_logdet_row=all_logdet_row,
        agent_logdet_row=agent_logdet_row,
        optimism_slack=optimism_slack if math.isfinite(optimism_slack)
        else float("nan"))


def run_experiment(config: RunConfig,
                   episode_hook: Optional[Callable[[EpisodeView], None]] = None
                   ) -> RunRecord:
    """Execute K episodes under the given configuration.

    Identical configurations produce identical RunRecords; the optional
    diagnostic hook observes each finished episode and must not mutate run
    state or consume its random streams.
    """
    state = build_run_state(config)
    cfg = state.config
    K, H = cfg.K, state.mdp.H
    ks = np.arange(1, K + 1, dtype=np.int64)
    ms = np.zeros(K, dtype=np.int64)
    regret_inc = np.zeros(K)
    triggered = np.zeros(K, dtype=bool)
    trigger_h = np.zeros(K, dtype=np.int64)
    cum_comm = np.zeros(K, dtype=np.int64)
    cum_switch = np.zeros(K, dtype=np.int64)
    agent_logdet = np.zeros((K, H)) if cfg.diagnostics else None
    all_logdet = np.zeros((K, H)) if cfg.diagnostics else None
    optimism = np.zeros(K) if cfg.diagnostics else None

    for k in range(1, K + 1):
        rng = np.random.default_rng(mix_seed(cfg.master_seed, k, TAG_TRAJECTORY))
        res = run_episode(state, k, rng)
        i = k - 1
        ms[i] = res.m
        regret_inc[i] = res.regret_inc
        triggered[i] = res.triggered
        trigger_h[i] = res.trigger_h
        cum_comm[i] = state.cum_comm
        cum_switch[i] = state.cum_switch
        if cfg.diagnostics:
            all_logdet[i] = res.all_logdet_row
            agent_logdet[i] = res.agent_logdet_row
            optimism[i] = res.optimism_slack
        if episode_hook is not None:
            episode_hook(res.view)

    record = RunRecord(
        k=ks, m=ms, regret_inc=regret_inc, cum_regret=np.cumsum(regret_inc),
        triggered=triggered, trigger_h=trigger_h,
        cum_comm=cum_comm, cum_switch=cum_switch,
        agent_logdet=agent_logdet, all_logdet=all_logdet,
        optimism_slack=optimism)
    if cfg.diagnostics:
        record.epoch_starts = epoch_boundaries(all_logdet, cfg.ridge, state.mdp.d)
    return record
