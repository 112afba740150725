"""Central server state and the communication protocols.

The server aggregates, per step h, a covariance matrix (initialized to
ridge * I so a download can replace an agent's covariance wholesale) and a
deduplicated global transition store keyed by episode index. One
communication round is one paired upload + download by a single agent.
"""

from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .agent import TransitionBatch
from .psdmat import PsdMatrix

if TYPE_CHECKING:
    from .agent import LsviAgent


class ProtocolKind(Enum):
    """When agents exchange data with the server.

    ASYNC_TRIGGER: the determinant-triggered asynchronous protocol.
    SYNC_ROUND_ROBIN: any trigger forces all agents to upload then download.
    FULL_SYNC: every agent communicates at the end of every episode.
    NO_COMM: never communicates; an agent still refits locally on trigger.
    """

    ASYNC_TRIGGER = "async_trigger"
    SYNC_ROUND_ROBIN = "sync_round_robin"
    FULL_SYNC = "full_sync"
    NO_COMM = "no_comm"


class Decision(Enum):
    """Episode-end outcome of the governing protocol for the active agent."""

    NONE = "none"
    COMMUNICATE = "communicate"
    LOCAL_UPDATE = "local_update"
    SYNC_ALL = "sync_all"


class ProtocolViolation(RuntimeError):
    """A duplicate (episode, step) upload; indicates a harness bug."""


class CentralServer:
    """Aggregated covariance and transition store, mutated strictly in turn."""

    def __init__(self, d: int, H: int, ridge: float):
        self.d = d
        self.H = H
        self.ridge = ridge
        self.cov = [PsdMatrix(d, ridge) for _ in range(H)]
        # Per h: parallel column lists plus the set of stored episode keys.
        self._cols: list[list[list]] = [[[], [], [], [], []] for _ in range(H)]
        self._episodes: list[set[int]] = [set() for _ in range(H)]
        self.uploads_received = 0
        self.downloads_served = 0

    def upload(self, agent: "LsviAgent") -> None:
        """Absorb the agent's buffered local delta (buffer is not cleared here).

        Each buffered feature becomes a rank-one covariance update; each
        buffered transition is inserted under its episode key. Every episode
        is uploaded by exactly one agent exactly once, so a key collision is
        fatal.
        """
        for hh in range(self.H):
            episodes = self._episodes[hh]
            cols = self._cols[hh]
            for t, phi in zip(agent.loc_transitions[hh], agent.loc_features[hh]):
                if t.episode in episodes:
                    raise ProtocolViolation(
                        f"duplicate upload for episode {t.episode}, step {t.step}")
                episodes.add(t.episode)
                cols[0].append(t.episode)
                cols[1].append(t.state)
                cols[2].append(t.action)
                cols[3].append(t.reward)
                cols[4].append(t.next_state)
                self.cov[hh].rank_one_update(phi)
        self.uploads_received += 1

    def download(self, agent: "LsviAgent") -> tuple[list[PsdMatrix], list[TransitionBatch]]:
        """Hand the agent covariance snapshots and the full global store.

        The agent's per-h covariance is replaced by a copy of the server's;
        the returned batches are sorted by episode, ready for the backward
        update.
        """
        covs = [c.copy() for c in self.cov]
        data = [self._batch(hh) for hh in range(self.H)]
        agent.qparams.cov = covs
        self.downloads_served += 1
        return covs, data

    def _batch(self, hh: int) -> TransitionBatch:
        ep, st, ac, rw, nx = self._cols[hh]
        batch = TransitionBatch(
            np.array(ep, np.int64), np.array(st, np.int64), np.array(ac, np.int64),
            np.array(rw, np.float64), np.array(nx, np.int64))
        order = np.argsort(batch.episode, kind="stable")
        if len(batch) and not np.all(order[:-1] < order[1:]):
            batch = TransitionBatch(batch.episode[order], batch.state[order],
                                    batch.action[order], batch.reward[order],
                                    batch.next_state[order])
        return batch

    def stored_count(self, hh: int) -> int:
        return len(self._episodes[hh])


def protocol_decide(kind: ProtocolKind, trigger_fired: bool) -> Decision:
    """Map the protocol and the agent's determinant trigger to an action.

    NO_COMM never touches the server but still refits from purely local data
    when the trigger fires (a local low-switching learner); SYNC_ROUND_ROBIN
    turns any trigger into a mandated all-agent synchronization.
    """
    if kind is ProtocolKind.FULL_SYNC:
        return Decision.COMMUNICATE
    if kind is ProtocolKind.ASYNC_TRIGGER:
        return Decision.COMMUNICATE if trigger_fired else Decision.NONE
    if kind is ProtocolKind.NO_COMM:
        return Decision.LOCAL_UPDATE if trigger_fired else Decision.NONE
    if kind is ProtocolKind.SYNC_ROUND_ROBIN:
        return Decision.SYNC_ALL if trigger_fired else Decision.NONE
    raise ValueError(f"unknown protocol kind {kind!r}")
