"""Offline and online replay buffers plus the mixed-ratio batch sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import Dataset
from .errors import EmptyBufferError, InvalidInputError

ORIGIN_OFFLINE = 0
ORIGIN_ONLINE = 1
_ORIGIN_NAMES = {ORIGIN_OFFLINE: "offline", ORIGIN_ONLINE: "online"}


@dataclass
class Batch:
    """A sampled training batch with per-sample provenance."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    returns_to_go: np.ndarray
    origins: np.ndarray      # ORIGIN_OFFLINE / ORIGIN_ONLINE per sample
    slots: np.ndarray        # index into the source buffer per sample

    def __len__(self) -> int:
        return len(self.states)


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions, all sharing one origin tag."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, origin: int):
        if capacity < 1:
            raise InvalidInputError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.origin = origin
        self.size = 0
        self._head = 0
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.returns_to_go = np.zeros(capacity)

    def insert(self, state, action, reward, next_state, done, return_to_go=0.0):
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        next_state = np.asarray(next_state, dtype=np.float64)
        if state.shape != (self.state_dim,) or action.shape != (self.action_dim,):
            raise InvalidInputError("transition dims do not match the buffer")
        i = self._head
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self.returns_to_go[i] = return_to_go
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            dones=self.dones[idx],
            returns_to_go=self.returns_to_go[idx],
            origins=np.full(len(idx), self.origin, dtype=np.int64),
            slots=np.asarray(idx, dtype=np.int64),
        )

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "ReplayBuffer":
        buf = cls(len(ds), ds.env.state_dim, ds.env.action_dim, ORIGIN_OFFLINE)
        buf.states[:] = ds.states
        buf.actions[:] = ds.actions
        buf.rewards[:] = ds.rewards
        buf.next_states[:] = ds.next_states
        buf.dones[:] = ds.dones
        buf.returns_to_go[:] = ds.returns_to_go
        buf.size = len(ds)
        buf._head = 0
        return buf


def _concat_batches(parts: list) -> Batch:
    return Batch(*[np.concatenate([getattr(p, f) for p in parts])
                   for f in ("states", "actions", "rewards", "next_states",
                             "dones", "returns_to_go", "origins", "slots")])


def sample_mixed(offline_buf: ReplayBuffer, online_buf, n: int, rho: float,
                 rng: np.random.Generator) -> Batch:
    """Draw floor(rho * n) samples from the offline buffer and the rest online.

    Draws are uniform with replacement and the combined batch order is
    shuffled. While the online buffer holds fewer than the online share, the
    whole batch falls back to offline draws (the cold-start phase).
    """
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError(f"rho must be in [0, 1], got {rho}")
    if n < 1:
        raise InvalidInputError("batch size must be >= 1")
    n_off = int(np.floor(rho * n))
    n_on = n - n_off
    online_size = 0 if online_buf is None else online_buf.size
    if offline_buf.size == 0 and online_size == 0:
        raise EmptyBufferError("both replay buffers are empty")
    if online_size < n_on:
        n_off, n_on = n, 0
    parts = []
    if n_off > 0:
        parts.append(offline_buf.gather(rng.integers(0, offline_buf.size, size=n_off)))
    if n_on > 0:
        parts.append(online_buf.gather(rng.integers(0, online_buf.size, size=n_on)))
    batch = _concat_batches(parts) if len(parts) > 1 else parts[0]
    perm = rng.permutation(len(batch))
    return Batch(*[getattr(batch, f)[perm] for f in (
        "states", "actions", "rewards", "next_states", "dones",
        "returns_to_go", "origins", "slots")])
