"""Toy pointmass environments, scripted behavior policies, and offline datasets.

Two variants stand in for dense-reward locomotion and sparse-reward
navigation: ``pointmass-dense`` rewards negative distance to goal every step,
``pointmass-sparse`` pays reward_scale on reaching the goal plus a constant
bias per step (10 / -5 by default) and terminates on goal contact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError

ENV_NAMES = ("pointmass-dense", "pointmass-sparse")

STATE_LOW, STATE_HIGH = -1.5, 1.5
GOAL_RADIUS = 0.1


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int = 2
    action_dim: int = 2
    horizon: int = 50
    goal: tuple = (1.0, 1.0)
    step_size: float = 0.1
    reward_scale: float = 1.0
    reward_bias: float = 0.0
    reset_noise: float = 0.05

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise InvalidInputError(f"unknown env {self.name!r}")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be >= 1")

    @property
    def sparse(self) -> bool:
        return self.name == "pointmass-sparse"


def make_env_spec(name: str, **overrides) -> EnvSpec:
    """Construct an EnvSpec with per-environment reward conventions."""
    if name == "pointmass-sparse":
        base = EnvSpec(name=name, reward_scale=10.0, reward_bias=-5.0)
    else:
        base = EnvSpec(name=name)
    return replace(base, **overrides) if overrides else base


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    return_to_go: float
    origin: str  # "offline" | "online"


@dataclass
class Dataset:
    env: EnvSpec
    quality: str
    gamma: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    returns_to_go: np.ndarray
    episode_starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.states)


def env_reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    """Start near the origin with uniform noise of radius ``reset_noise``."""
    return rng.uniform(-spec.reset_noise, spec.reset_noise, size=spec.state_dim)


def env_step(spec: EnvSpec, state: np.ndarray, action: np.ndarray):
    """One dynamics step; returns (next_state, reward, done).

    ``done`` reflects goal absorption in the sparse variant only; the caller
    tracks the horizon.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape != (spec.state_dim,) or action.shape != (spec.action_dim,):
        raise InvalidInputError("state/action dims do not match the env spec")
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
        raise InvalidInputError("non-finite state or action")
    a = np.clip(action, -1.0, 1.0)
    next_state = np.clip(state + spec.step_size * a, STATE_LOW, STATE_HIGH)
    dist = float(np.linalg.norm(next_state - np.asarray(spec.goal)))
    if spec.sparse:
        reached = dist < GOAL_RADIUS
        reward = spec.reward_scale * float(reached) + spec.reward_bias
        return next_state, reward, reached
    return next_state, -dist, False


def scripted_policy(spec: EnvSpec, state: np.ndarray, quality: str,
                    rng: np.random.Generator) -> np.ndarray:
    """Expert / medium / random data-collection policies.

    Expert is a clipped proportional controller toward the goal (gain 5);
    medium is the expert plus Gaussian noise (sigma 0.3), replaced by a fully
    random action with probability 0.3.
    """
    if quality not in ("expert", "medium", "random"):
        raise InvalidInputError(f"unknown quality {quality!r}")
    if quality == "random":
        return rng.uniform(-1.0, 1.0, size=spec.action_dim)
    expert = np.clip(5.0 * (np.asarray(spec.goal) - state), -1.0, 1.0)
    if quality == "expert":
        return expert
    if rng.uniform() < 0.3:
        return rng.uniform(-1.0, 1.0, size=spec.action_dim)
    return np.clip(expert + 0.3 * rng.standard_normal(spec.action_dim), -1.0, 1.0)


def rollout_episode(spec: EnvSpec, policy, rng: np.random.Generator):
    """Run one episode with ``policy(state, rng) -> action``.

    Returns (states, actions, rewards, next_states, dones) arrays. The final
    transition is marked done whether it ended by goal absorption or horizon.
    """
    states, actions, rewards, next_states, dones = [], [], [], [], []
    s = env_reset(spec, rng)
    for step in range(spec.horizon):
        a = policy(s, rng)
        s2, r, absorbed = env_step(spec, s, a)
        terminal = absorbed or step == spec.horizon - 1
        states.append(s)
        actions.append(np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0))
        rewards.append(r)
        next_states.append(s2)
        dones.append(terminal)
        s = s2
        if absorbed:
            break
    return (np.array(states), np.array(actions), np.array(rewards),
            np.array(next_states), np.array(dones, dtype=bool))


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted suffix sums within one episode: rtg_t = r_t + gamma * rtg_{t+1}."""
    out = np.zeros_like(rewards, dtype=np.float64)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def generate_dataset(spec: EnvSpec, quality: str, n_transitions: int,
                     gamma: float, seed: int) -> Dataset:
    """Roll complete episodes until at least ``n_transitions`` are collected."""
    if n_transitions < spec.horizon:
        raise InvalidInputError("n_transitions must cover at least one episode")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chunks = []
    episode_starts = []
    total = 0
    while total < n_transitions:
        ep = rollout_episode(spec, lambda s, r: scripted_policy(spec, s, quality, r), rng)
        rtg = returns_to_go(ep[2], gamma)
        episode_starts.append(total)
        chunks.append((*ep, rtg))
        total += len(ep[0])
    return Dataset(
        env=spec,
        quality=quality,
        gamma=gamma,
        states=np.concatenate([c[0] for c in chunks]),
        actions=np.concatenate([c[1] for c in chunks]),
        rewards=np.concatenate([c[2] for c in chunks]),
        next_states=np.concatenate([c[3] for c in chunks]),
        dones=np.concatenate([c[4] for c in chunks]),
        returns_to_go=np.concatenate([c[5] for c in chunks]),
        episode_starts=np.array(episode_starts, dtype=np.int64),
    )


# -- dataset file format --------------------------------------------------------
#
# header:  magic "SLDS" | version u32 | env name (u16 len + utf8)
#          | quality (u16 len + utf8) | state_dim u32 | action_dim u32
#          | gamma f64 | count u64
# records: per transition, little-endian f64s:
#          state | action | reward | next_state | done u8 | return_to_go
# footer:  episode count u64 | episode start indices u64[]

_DS_MAGIC = b"SLDS"
_DS_VERSION = 1


def _record_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype([
        ("state", "<f8", (state_dim,)),
        ("action", "<f8", (action_dim,)),
        ("reward", "<f8"),
        ("next_state", "<f8", (state_dim,)),
        ("done", "<u1"),
        ("return_to_go", "<f8"),
    ])


def save_dataset(path, ds: Dataset):
    with open(path, "wb") as f:
        f.write(_DS_MAGIC)
        f.write(struct.pack("<I", _DS_VERSION))
        for text in (ds.env.name, ds.quality):
            raw = text.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        n = len(ds)
        f.write(struct.pack("<IIdQ", ds.env.state_dim, ds.env.action_dim, ds.gamma, n))
        rec = np.zeros(n, dtype=_record_dtype(ds.env.state_dim, ds.env.action_dim))
        rec["state"] = ds.states
        rec["action"] = ds.actions
        rec["reward"] = ds.rewards
        rec["next_state"] = ds.next_states
        rec["done"] = ds.dones
        rec["return_to_go"] = ds.returns_to_go
        f.write(rec.tobytes())
        f.write(struct.pack("<Q", len(ds.episode_starts)))
        f.write(ds.episode_starts.astype("<u8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _DS_MAGIC:
        raise InvalidInputError(f"{path}: not a dataset file")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != _DS_VERSION:
        raise InvalidInputError(f"{path}: unsupported dataset version {version}")
    texts = []
    for _ in range(2):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        texts.append(blob[off:off + ln].decode("utf-8"))
        off += ln
    name, quality = texts
    sd, ad, gamma, n = struct.unpack_from("<IIdQ", blob, off)
    off += struct.calcsize("<IIdQ")
    spec = make_env_spec(name)
    if (sd, ad) != (spec.state_dim, spec.action_dim):
        raise InvalidInputError(f"{path}: dims ({sd}, {ad}) do not match env {name!r}")
    dtype = _record_dtype(sd, ad)
    rec = np.frombuffer(blob, dtype, n, off)
    off += n * dtype.itemsize
    (n_eps,) = struct.unpack_from("<Q", blob, off)
    off += 8
    starts = np.frombuffer(blob, "<u8", n_eps, off).astype(np.int64)
    return Dataset(env=spec, quality=quality, gamma=gamma,
                   states=rec["state"].astype(np.float64),
                   actions=rec["action"].astype(np.float64),
                   rewards=rec["reward"].astype(np.float64),
                   dones=rec["done"].astype(bool),
                   next_states=rec["next_state"].astype(np.float64),
                   returns_to_go=rec["return_to_go"].astype(np.float64),
                   episode_starts=starts)
