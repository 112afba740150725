"""Linear MDP construction, exact planning, sampling, and serialization.

All instances here are tabular MDPs embedded as linear MDPs via the one-hot
feature map phi(s, a) = e_{s * n_actions + a}, so the transition kernel is
P_h(.|s,a) = phi^T mu_h and the reward is r_h(s,a) = phi^T gamma_h, with the
exact tables retained for planning and regret accounting.

Index conventions: states and actions are 0-based everywhere; the step index
h is 1-based (1 <= h <= H) in public signatures, matching the episodic
formulation, and converted to 0-based only at array access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PROB_ROW_TOL = 1e-10     # probability rows must sum to 1 within this
PROB_NEG_TOL = 1e-12     # entries may dip this far below zero from rounding


class InvalidMdpError(ValueError):
    """Raised when construction inputs violate the linear MDP constraints."""


class UnsupportedInstanceError(RuntimeError):
    """Raised when exact planning is requested without tabular backing."""


@dataclass
class LinearMdp:
    """A finite linear MDP with one-hot embedding and exact tabular backing.

    Attributes:
        d: feature dimension (= n_states * n_actions for one-hot instances)
        H: horizon length
        features: (n_states, n_actions, d) feature map
        mu: (H, d, n_states) unnormalized transition measures
        gamma: (H, d) reward parameters
        transitions: optional (H, S, A, S) exact transition tables
        rewards: optional (H, S, A) exact reward tables
    """

    d: int
    H: int
    n_states: int
    n_actions: int
    features: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    transitions: Optional[np.ndarray] = None
    rewards: Optional[np.ndarray] = None
    _cum_rows: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for arr in (self.features, self.mu, self.gamma, self.transitions, self.rewards):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def is_tabular(self) -> bool:
        return self.transitions is not None and self.rewards is not None

    def feature(self, s: int, a: int) -> np.ndarray:
        return self.features[s, a]

    def transition_row(self, h: int, s: int, a: int) -> np.ndarray:
        """P_h(.|s, a) as a length-n_states probability row (h is 1-based)."""
        if self.transitions is not None:
            return self.transitions[h - 1, s, a]
        row = self.features[s, a] @ self.mu[h - 1]
        row = np.clip(row, 0.0, None)
        return row / row.sum()

    def reward(self, h: int, s: int, a: int) -> float:
        if self.rewards is not None:
            return float(self.rewards[h - 1, s, a])
        return float(self.features[s, a] @ self.gamma[h - 1])

    def step(self, s: int, a: int, h: int, rng: np.random.Generator) -> tuple[float, int]:
        """Sample one environment step; the reward is deterministic in (s, a, h).

        The next state is drawn by inverse CDF on the transition row, so the
        outcome is a pure function of (mdp, s, a, h, rng state).
        """
        if self._cum_rows is None:
            if self.transitions is not None:
                cum = np.cumsum(self.transitions, axis=-1)
            else:
                probs = np.stack(
                    [np.clip(self.features.reshape(-1, self.d) @ self.mu[h0], 0.0, None)
                     for h0 in range(self.H)]
                ).reshape(self.H, self.n_states, self.n_actions, self.n_states)
                probs /= probs.sum(axis=-1, keepdims=True)
                cum = np.cumsum(probs, axis=-1)
            object.__setattr__(self, "_cum_rows", cum)
        cum_row = self._cum_rows[h - 1, s, a]
        u = rng.random()
        nxt = int(np.searchsorted(cum_row, u, side="right"))
        if nxt >= self.n_states:
            nxt = self.n_states - 1
        return self.reward(h, s, a), nxt


@dataclass
class PlannerOutput:
    """Exact optimal value/Q tables and a greedy optimal policy.

    v_star and optimal_policy are (H, S); q_star is (H, S, A). Row h-1 holds
    the step-h quantities.
    """

    v_star: np.ndarray
    q_star: np.ndarray
    optimal_policy: np.ndarray


def _tabular_to_linear(P: np.ndarray, r: np.ndarray) -> LinearMdp:
    """One-hot embedding without validation (used by the file loader too)."""
    P = np.asarray(P, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    H, S, A, S2 = P.shape
    if S2 != S or r.shape != (H, S, A):
        raise InvalidMdpError(f"inconsistent table shapes P{P.shape} r{r.shape}")
    d = S * A
    features = np.eye(d).reshape(S, A, d)
    mu = np.zeros((H, d, S))
    gamma = np.zeros((H, d))
    for h in range(H):
        mu[h] = P[h].reshape(d, S)
        gamma[h] = r[h].reshape(d)
    return LinearMdp(
        d=d, H=H, n_states=S, n_actions=A,
        features=features, mu=mu, gamma=gamma,
        transitions=P.copy(), rewards=r.copy(),
    )


def build_tabular_as_linear(P: np.ndarray, r: np.ndarray) -> LinearMdp:
    """Embed exact (P, r) tables as a linear MDP with one-hot features.

    P has shape (H, S, A, S) with valid probability rows; r has shape
    (H, S, A) with entries in [0, 1].
    """
    P = np.asarray(P, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    sums = P.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROB_ROW_TOL):
        h, s, a = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
        raise InvalidMdpError(
            f"transition row (h={h + 1}, s={s}, a={a}) sums to {sums[h, s, a]:.12g}"
        )
    if np.any(P < -PROB_NEG_TOL):
        raise InvalidMdpError("transition table has negative entries")
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise InvalidMdpError("rewards must lie in [0, 1]")
    return _tabular_to_linear(P, r)


def random_tabular(seed: int, n_states: int, n_actions: int, H: int) -> LinearMdp:
    """Random tabular instance, deterministic in the seed."""
    if min(n_states, n_actions, H) < 1:
        raise InvalidMdpError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    P = rng.random((H, n_states, n_actions, n_states)) + 1e-3
    P /= P.sum(axis=-1, keepdims=True)
    r = rng.random((H, n_states, n_actions))
    return build_tabular_as_linear(P, r)


def default_hard_gap(d: int, M: int, K: int) -> float:
    """Default arm gap scaling like 1/sqrt(K), keeping the instance hard."""
    return min(0.25, math.sqrt(d * M / (8.0 * K)))


def hard_instance(d: int, H: int, gap: float) -> LinearMdp:
    """The two-armed hard family: d/2 - 2 initial states feeding two absorbers.

    State layout: indices 0 .. d/2-3 are initial states; index d/2-2 is the
    rewarding absorber (reward 1 at every step) and index d/2-1 the zero
    absorber. From any initial state, action 0 reaches the rewarding absorber
    with probability 1/2 + gap and action 1 with probability 1/2 - gap, so
    each initial state embeds a 2-armed Bernoulli bandit with value spread
    2 * gap * (H - 1). One-hot embedded at dimension |S| * |A| = d.
    """
    if d % 2 != 0 or d < 8:
        raise InvalidMdpError(f"d must be an even integer >= 8, got {d}")
    if H < 2:
        raise InvalidMdpError(f"H must be >= 2, got {H}")
    if not 0.0 <= gap < 0.5:
        raise InvalidMdpError(f"gap must lie in [0, 1/2), got {gap}")
    S = d // 2
    A = 2
    n_init = S - 2
    good, bad = n_init, n_init + 1
    P = np.zeros((H, S, A, S))
    r = np.zeros((H, S, A))
    for h in range(H):
        for i in range(n_init):
            P[h, i, 0, good] = 0.5 + gap
            P[h, i, 0, bad] = 0.5 - gap
            P[h, i, 1, good] = 0.5 - gap
            P[h, i, 1, bad] = 0.5 + gap
        P[h, good, :, good] = 1.0
        P[h, bad, :, bad] = 1.0
        r[h, good, :] = 1.0
    return build_tabular_as_linear(P, r)


def hard_num_initial_states(mdp: LinearMdp) -> int:
    return mdp.n_states - 2


def value_iteration(mdp: LinearMdp) -> PlannerOutput:
    """Exact backward dynamic programming on the tabular backing."""
    if not mdp.is_tabular:
        raise UnsupportedInstanceError("value_iteration requires tabular backing")
    H, S, A = mdp.H, mdp.n_states, mdp.n_actions
    q = np.zeros((H, S, A))
    v = np.zeros((H + 1, S))
    pol = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        q[h] = mdp.rewards[h] + mdp.transitions[h] @ v[h + 1]
        v[h] = q[h].max(axis=1)
        pol[h] = q[h].argmax(axis=1)
    return PlannerOutput(v_star=v[:H], q_star=q, optimal_policy=pol)


def eval_policy(mdp: LinearMdp, policy: np.ndarray) -> np.ndarray:
    """Exact backward evaluation of a deterministic (H, S) policy table."""
    if not mdp.is_tabular:
        raise UnsupportedInstanceError("eval_policy requires tabular backing")
    policy = np.asarray(policy, dtype=np.int64)
    H, S = mdp.H, mdp.n_states
    if policy.shape != (H, S):
        raise InvalidMdpError(f"policy shape {policy.shape} != ({H}, {S})")
    if np.any(policy < 0) or np.any(policy >= mdp.n_actions):
        raise InvalidMdpError("policy action out of range")
    values = np.zeros((H + 1, S))
    idx = np.arange(S)
    for h in range(H - 1, -1, -1):
        acts = policy[h]
        values[h] = mdp.rewards[h][idx, acts] + mdp.transitions[h][idx, acts] @ values[h + 1]
    return values[:H]


# ---------------------------------------------------------------------------
# Validation


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_slack: float
    detail: str = ""


def validate_linear_mdp(mdp: LinearMdp) -> list[CheckResult]:
    """Run every structural constraint check, reporting worst-case slack.

    Slack is "amount by which the constraint is exceeded": <= 0 passes.
    """
    out = []
    norms = np.linalg.norm(mdp.features.reshape(-1, mdp.d), axis=1)
    out.append(CheckResult("feature_norm_le_1", bool(norms.max() <= 1.0 + 1e-9),
                           float(norms.max() - 1.0)))

    probs = np.einsum("sad,hdt->hsat", mdp.features.reshape(mdp.n_states, mdp.n_actions, mdp.d), mdp.mu)
    sums = probs.sum(axis=-1)
    row_err = np.abs(sums - 1.0)
    h, s, a = np.unravel_index(np.argmax(row_err), row_err.shape)
    out.append(CheckResult("transition_rows_sum_to_1", bool(row_err.max() <= PROB_ROW_TOL),
                           float(row_err.max() - PROB_ROW_TOL),
                           f"worst at (h={h + 1}, s={s}, a={a}), sum={sums[h, s, a]:.12g}"))
    neg = -probs.min()
    out.append(CheckResult("transition_probs_nonnegative", bool(neg <= PROB_NEG_TOL),
                           float(neg - PROB_NEG_TOL)))

    rewards = np.einsum("sad,hd->hsa", mdp.features.reshape(mdp.n_states, mdp.n_actions, mdp.d), mdp.gamma)
    low, high = rewards.min(), rewards.max()
    slack = max(0.0 - low, high - 1.0)
    out.append(CheckResult("rewards_in_unit_interval", bool(slack <= 1e-12), float(slack)))

    sqrt_d = math.sqrt(mdp.d)
    gnorm = np.linalg.norm(mdp.gamma, axis=1).max()
    out.append(CheckResult("gamma_norm_le_sqrt_d", bool(gnorm <= sqrt_d + 1e-9),
                           float(gnorm - sqrt_d)))
    mu_total = np.linalg.norm(mdp.mu.sum(axis=2), axis=1).max()
    out.append(CheckResult("mu_total_measure_norm_le_sqrt_d", bool(mu_total <= sqrt_d + 1e-9),
                           float(mu_total - sqrt_d)))

    if mdp.is_tabular:
        diff = float(np.abs(probs - mdp.transitions).max())
        out.append(CheckResult("embedding_matches_tables", diff <= 1e-12, diff))
        rdiff = float(np.abs(rewards - mdp.rewards).max())
        out.append(CheckResult("reward_embedding_matches_tables", rdiff <= 1e-12, rdiff))
    return out


# ---------------------------------------------------------------------------
# Serialization (sectioned text format, 0-based indices, round-trip stable)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_mdp(mdp: LinearMdp, path: str) -> None:
    """Write a tabular-backed MDP in the sectioned text format."""
    if not mdp.is_tabular:
        raise UnsupportedInstanceError("only tabular-backed MDPs serialize")
    lines = ["[meta]",
             f"d = {mdp.d}",
             f"H = {mdp.H}",
             f"n_states = {mdp.n_states}",
             f"n_actions = {mdp.n_actions}",
             ""]
    for h in range(mdp.H):
        for s in range(mdp.n_states):
            for a in range(mdp.n_actions):
                lines.append(f"[transition {h} {s} {a}]")
                lines.append(" ".join(_fmt(p) for p in mdp.transitions[h, s, a]))
                lines.append("")
    for h in range(mdp.H):
        lines.append(f"[reward {h}]")
        for s in range(mdp.n_states):
            lines.append(" ".join(_fmt(x) for x in mdp.rewards[h, s]))
        lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))


def read_mdp(path: str) -> LinearMdp:
    """Parse the sectioned text format without constraint validation.

    Validation is deliberately separate (validate_linear_mdp) so corrupt
    files can still be loaded and reported on.
    """
    meta: dict[str, int] = {}
    trans_rows: dict[tuple[int, int, int], list[float]] = {}
    reward_rows: dict[int, list[list[float]]] = {}
    section: Optional[list[str]] = None
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].split()
                if not section or section[0] not in ("meta", "transition", "reward"):
                    raise InvalidMdpError(f"line {lineno}: unknown section {line!r}")
                if section[0] == "transition" and len(section) != 4:
                    raise InvalidMdpError(
                        f"line {lineno}: transition section needs 'h s a' indices")
                if section[0] == "reward":
                    if len(section) != 2:
                        raise InvalidMdpError(
                            f"line {lineno}: reward section needs an 'h' index")
                    reward_rows[int(section[1])] = []
                continue
            if section is None:
                raise InvalidMdpError(f"line {lineno}: content outside any section")
            if section[0] == "meta":
                key, _, val = line.partition("=")
                meta[key.strip()] = int(val.strip())
            elif section[0] == "transition":
                h, s, a = (int(x) for x in section[1:4])
                trans_rows[(h, s, a)] = [float(x) for x in line.split()]
            else:
                reward_rows[int(section[1])].append([float(x) for x in line.split()])
    try:
        H, S, A = meta["H"], meta["n_states"], meta["n_actions"]
    except KeyError as e:
        raise InvalidMdpError(f"missing meta key {e}") from None
    P = np.zeros((H, S, A, S))
    r = np.zeros((H, S, A))
    for (h, s, a), row in trans_rows.items():
        if len(row) != S:
            raise InvalidMdpError(f"transition row ({h},{s},{a}) has {len(row)} entries, want {S}")
        P[h, s, a] = row
    for h, rows in reward_rows.items():
        if len(rows) != S:
            raise InvalidMdpError(f"reward section {h} has {len(rows)} rows, want {S}")
        r[h] = rows
    mdp = _tabular_to_linear(P, r)
    if meta.get("d", mdp.d) != mdp.d:
        raise InvalidMdpError(f"meta d={meta['d']} inconsistent with {S}*{A}")
    return mdp
