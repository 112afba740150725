"""Per-agent learner: greedy acting, local accumulation, determinant trigger,
and the backward ridge-regression value-iteration update.

The Q-function of an agent at step h is

    Q_h(s, a) = clip( phi(s,a)^T w_h + beta * ||phi(s,a)||_{cov_h^-1},
                      0, H - h + 1 )

where cov_h is the covariance snapshot the agent last downloaded (or its own
under no communication) and w_h the matching regression weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .mdp import LinearMdp
from .psdmat import PsdMatrix

# Strictness guard for the determinant trigger. One-hot features make the
# determinant ratio a product of small rationals, so it lands EXACTLY on the
# 1 + alpha boundary in real arithmetic routinely (e.g. (3/2)*(4/3) = 2); the
# strict inequality must then not fire. Float paths resolve such ties either
# way within ~1e-12 in log space, so genuine exceedances are required to clear
# the threshold by this margin (far below any true nonzero rational gap).
TRIGGER_LOG_TOLERANCE = 1e-11


@dataclass
class Transition:
    """One environment step; ``step`` is the 1-based h index."""

    episode: int
    step: int
    state: int
    action: int
    reward: float
    next_state: int


@dataclass
class TransitionBatch:
    """Column-oriented transitions for one step h, kept in episode order.

    The regression in the backward update is vectorized over these columns;
    the per-record Transition type remains the unit of bookkeeping.
    """

    episode: np.ndarray
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray

    def __len__(self) -> int:
        return self.episode.shape[0]

    @classmethod
    def empty(cls) -> "TransitionBatch":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64),
                   np.empty(0, np.float64), np.empty(0, np.int64))

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        if not transitions:
            return cls.empty()
        return cls(
            np.array([t.episode for t in transitions], np.int64),
            np.array([t.state for t in transitions], np.int64),
            np.array([t.action for t in transitions], np.int64),
            np.array([t.reward for t in transitions], np.float64),
            np.array([t.next_state for t in transitions], np.int64),
        )


class QParams:
    """Regression weights, covariance snapshots, and the bonus multiplier."""

    __slots__ = ("w", "cov", "beta")

    def __init__(self, d: int, H: int, ridge: float, beta: float):
        self.w = np.zeros((H, d))
        self.cov = [PsdMatrix(d, ridge) for _ in range(H)]
        self.beta = float(beta)


class LsviAgent:
    """One agent's state and operations.

    Between parameter updates the Q-function is frozen, so greedy acting is a
    pure function of (s, h). Local accumulation tracks, per step h, the raw
    feature vectors since the last update plus a scratch SPD matrix equal to
    cov_h + sum of their outer products; the scratch is built lazily and kept
    incremental so the determinant trigger is O(H) per episode.
    """

    def __init__(self, agent_id: int, d: int, H: int, alpha: float, ridge: float, beta: float):
        self.agent_id = agent_id
        self.d = d
        self.H = H
        self.alpha = float(alpha)
        self.ridge = float(ridge)
        self.qparams = QParams(d, H, ridge, beta)
        self._log_threshold = math.log1p(self.alpha)
        # Per-h local delta since last update: raw vectors + aligned transitions.
        self.loc_features: list[list[np.ndarray]] = [[] for _ in range(H)]
        self.loc_transitions: list[list[Transition]] = [[] for _ in range(H)]
        self._scratch: list[Optional[PsdMatrix]] = [None] * H
        # Full own-trajectory history per h (column lists), used by the
        # no-communication local update path.
        self._own_cols: list[list[list]] = [[[], [], [], [], []] for _ in range(H)]
        self.episodes_seen = 0
        self.last_update_episode = 0

    # -- read-only evaluation ------------------------------------------------

    def eval_q(self, mdp: LinearMdp, s: int, a: int, h: int) -> float:
        """Truncated optimistic Q estimate at 1-based step h."""
        phi = mdp.features[s, a]
        qp = self.qparams
        raw = float(phi @ qp.w[h - 1]) + qp.beta * math.sqrt(qp.cov[h - 1].quad_form(phi))
        hi = self.H - h + 1
        return min(max(raw, 0.0), hi)

    def action_values(self, mdp: LinearMdp, s: int, h: int) -> np.ndarray:
        """Vector of truncated Q estimates over all actions at state s."""
        feats = mdp.features[s]
        qp = self.qparams
        raw = feats @ qp.w[h - 1] + qp.beta * np.sqrt(qp.cov[h - 1].quad_form_many(feats))
        return np.clip(raw, 0.0, self.H - h + 1)

    def greedy_action(self, mdp: LinearMdp, s: int, h: int) -> int:
        """Argmax of the Q estimate; ties break to the smallest action index."""
        return int(np.argmax(self.action_values(mdp, s, h)))

    # -- local accumulation and trigger --------------------------------------

    def record_transition(self, mdp: LinearMdp, t: Transition) -> None:
        assert 1 <= t.step <= self.H
        hh = t.step - 1
        phi = mdp.features[t.state, t.action]
        self.loc_features[hh].append(phi)
        self.loc_transitions[hh].append(t)
        cols = self._own_cols[hh]
        cols[0].append(t.episode)
        cols[1].append(t.state)
        cols[2].append(t.action)
        cols[3].append(t.reward)
        cols[4].append(t.next_state)
        if self._scratch[hh] is not None:
            self._scratch[hh].rank_one_update(phi)

    @property
    def local_buffer(self) -> list[Transition]:
        """Flat view of buffered transitions in (episode, step) order."""
        out = [t for per_h in self.loc_transitions for t in per_h]
        out.sort(key=lambda t: (t.episode, t.step))
        return out

    def _ensure_scratch(self, hh: int) -> PsdMatrix:
        if self._scratch[hh] is None:
            scratch = self.qparams.cov[hh].copy()
            for v in self.loc_features[hh]:
                scratch.rank_one_update(v)
            self._scratch[hh] = scratch
        return self._scratch[hh]

    def log_det_ratios(self) -> np.ndarray:
        """Per-h log of det(cov_h + local delta) / det(cov_h)."""
        return np.array([
            self._ensure_scratch(hh).logdet - self.qparams.cov[hh].logdet
            for hh in range(self.H)
        ])

    def should_communicate(self) -> tuple[bool, Optional[int]]:
        """Determinant trigger at episode end.

        Fires iff det(cov_h + delta_h)/det(cov_h) strictly exceeds 1 + alpha
        for some h; returns the smallest such 1-based h. The comparison runs
        in log space with the boundary guard so a ratio exactly equal to
        1 + alpha never fires, matching the strict inequality.
        """
        for hh in range(self.H):
            if not self.loc_features[hh]:
                continue
            delta = self._ensure_scratch(hh).logdet - self.qparams.cov[hh].logdet
            if delta > self._log_threshold + TRIGGER_LOG_TOLERANCE:
                return True, hh + 1
        return False, None

    def reset_local(self) -> None:
        """Clear the local delta after an update (upload consumed it)."""
        self.loc_features = [[] for _ in range(self.H)]
        self.loc_transitions = [[] for _ in range(self.H)]
        self._scratch = [None] * self.H

    def local_cov_snapshot(self) -> list[PsdMatrix]:
        """Per-h cov_h + local delta, handing off the scratch objects.

        This is the covariance a no-communication learner adopts when its
        trigger fires; callers must reset_local() afterwards so the handed-off
        matrices are no longer aliased as scratch.
        """
        return [self._ensure_scratch(hh) for hh in range(self.H)]

    def own_history(self) -> list[TransitionBatch]:
        """Per-h batches of every transition this agent has ever taken."""
        out = []
        for hh in range(self.H):
            ep, st, ac, rw, nx = self._own_cols[hh]
            out.append(TransitionBatch(
                np.array(ep, np.int64), np.array(st, np.int64), np.array(ac, np.int64),
                np.array(rw, np.float64), np.array(nx, np.int64)))
        return out

    # -- the backward update --------------------------------------------------

    def lsvi_backward_update(self, mdp: LinearMdp,
                             global_data: Sequence[TransitionBatch],
                             global_cov: Sequence[PsdMatrix]) -> QParams:
        """Recompute all regression weights from the given global dataset.

        For h = H down to 1 the targets are r + max_a Q_{h+1}(s', a) with
        Q_{H+1} = 0, each max evaluated with the step-(h+1) parameters
        computed in this same pass; w_h solves the ridge normal equations
        against global_cov[h], which must equal ridge*I plus the sum of
        feature outer products over global_data[h]. The covariance snapshots
        are adopted as the agent's new cov_h. Callers reset the local delta
        afterwards.
        """
        qp = self.qparams
        H, d = self.H, self.d
        new_w = np.zeros((H, d))
        feats_flat = mdp.features.reshape(mdp.n_states * mdp.n_actions, d)
        next_value = None  # value table for step h+1, None means zero
        for hh in range(H - 1, -1, -1):
            batch = global_data[hh]
            cov = global_cov[hh]
            if len(batch) > 0:
                y = batch.reward.copy()
                if next_value is not None:
                    y += next_value[batch.next_state]
                phis = mdp.features[batch.state, batch.action]
                rhs = phis.T @ y
                new_w[hh] = cov.solve(rhs)
            qp.cov[hh] = cov
            qp.w[hh] = new_w[hh]
            # Value table V_h(s) = max_a Q_h(s, a) for the step below.
            raw = (feats_flat @ new_w[hh]
                   + qp.beta * np.sqrt(cov.quad_form_many(feats_flat)))
            q_table = np.clip(raw.reshape(mdp.n_states, mdp.n_actions), 0.0, H - hh)
            next_value = q_table.max(axis=1)
        return qp


def theoretical_beta(d: int, H: int, M: int, K: int, alpha: float,
                     ridge: float, delta: float, c_beta: float) -> float:
    """The confidence-width formula from the regret analysis.

    beta = c_beta * d * H * C * [ log((2+K) / (delta * min(1, ridge,
    alpha*ridge))) + log(H * d * C) ] with C = M*sqrt(alpha) +
    sqrt(1 + M*alpha).
    """
    if min(d, H, M, K) < 1:
        raise ValueError("d, H, M, K must be positive integers")
    if alpha <= 0 or ridge <= 0:
        raise ValueError("alpha and ridge must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if c_beta < 0:
        raise ValueError("c_beta must be nonnegative")
    c_tilde = M * math.sqrt(alpha) + math.sqrt(1.0 + M * alpha)
    log_term = math.log((2.0 + K) / (delta * min(1.0, ridge, alpha * ridge)))
    return c_beta * d * H * c_tilde * (log_term + math.log(H * d * c_tilde))


def practical_beta(d: int, H: int, K: int, delta: float, c: float = 0.1) -> float:
    """Empirical-scale bonus multiplier used for simulation runs.

    The theoretical width is vacuous at desk scale; this follows the standard
    square-root-log scaling with a small constant.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return c * d * H * math.sqrt(math.log(2.0 * d * K * H / delta))
