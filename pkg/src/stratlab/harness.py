"""Offline pretraining, online fine-tuning with stratified updates, and evaluation.

The fine-tuning loop is the full procedure: act, store, sample a mixed batch,
generate actions for the batch states, update the energy net, score and
stratify the batch, cap exchanges, and apply the stratified critic/value and
policy updates with target maintenance.

Reproducibility contract: every run spawns a fixed set of named rng streams
from the config seed (in the order listed in ``_spawn_streams``). Two runs
with identical config and seed produce byte-identical metrics files.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .agents import AgentConfig, default_agent_config, make_agent
from .diffusion import BehaviorModel, DiffusionConfig, behavior_train_step, sample_unguided
from .energy import EnergyConfig, EnergyModel, energy_train_step, sample_guided
from .envs import (
    EnvSpec,
    env_reset,
    env_step,
    load_dataset,
    make_env_spec,
    rollout_episode,
    scripted_policy,
)
from .errors import InvalidConfigError, InvalidInputError
from .nets import load_checkpoint, save_checkpoint
from .replay import ORIGIN_ONLINE, Batch, ReplayBuffer, sample_mixed
from .stratify import (
    alignment_scores,
    constrain_exchange,
    degenerate_stratification,
    stratify,
)

METRICS_SCHEMA_VERSION = 1
REFERENCE_SEED = 123456789  # fixed stream for normalized-score references
REFERENCE_EPISODES = 100


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec
    dataset: str
    agent: AgentConfig
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    offline_steps: int = 20000
    online_steps: int = 10000
    batch_size: int = 256
    eval_every: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    out_dir: str = "runs/out"
    normalize_states: bool = None   # None resolves to dense yes / sparse no
    explore_std: float = 0.1
    online_capacity: int = 100000
    sigma_kl: float = 0.1
    align_draws: int = 1            # generated actions per state when scoring
    score_with_updated_energy: bool = False
    record_loss_trace: bool = False

    def __post_init__(self):
        if self.offline_steps < 0 or self.online_steps < 0:
            raise InvalidConfigError("step counts must be >= 0")
        if self.batch_size < 2:
            raise InvalidConfigError("batch_size must be >= 2")
        if self.normalize_states is None:
            object.__setattr__(self, "normalize_states", not self.env.sparse)


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def _build_strict(cls, data: dict, transforms=()):
    data = dict(data)
    for key in transforms:
        if key in data and data[key] is not None:
            data[key] = tuple(data[key])
    try:
        return cls(**data)
    except TypeError as e:
        raise InvalidConfigError(f"bad {cls.__name__} section: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    """Strict parse: unknown keys anywhere are rejected."""
    data = dict(data)
    try:
        env_d = dict(data.pop("env"))
        dataset = data.pop("dataset")
    except KeyError as e:
        raise InvalidConfigError(f"config missing required section {e}") from None
    if "goal" in env_d:
        env_d["goal"] = tuple(env_d["goal"])
    try:
        name = env_d.pop("name")
        env = make_env_spec(name, **env_d)
    except (KeyError, TypeError) as e:
        raise InvalidConfigError(f"bad env section: {e}") from None
    agent_d = dict(data.pop("agent", {}))
    backbone = agent_d.pop("backbone", "calql")
    if "hidden_dims" in agent_d:
        agent_d["hidden_dims"] = tuple(agent_d["hidden_dims"])
    try:
        agent = default_agent_config(backbone, env.sparse, **agent_d)
    except TypeError as e:
        raise InvalidConfigError(f"bad agent section: {e}") from None
    diffusion = _build_strict(DiffusionConfig, data.pop("diffusion", {}), ("hidden_dims",))
    energy = _build_strict(EnergyConfig, data.pop("energy", {}), ("hidden_dims",))
    return _build_strict(RunConfig, {"env": env, "dataset": dataset, "agent": agent,
                                     "diffusion": diffusion, "energy": energy, **data})


class StateNormalizer:
    """Frozen mean/std transform fitted on the offline dataset."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return (states - self.mean) / self.std

    @classmethod
    def fit(cls, states: np.ndarray) -> "StateNormalizer":
        return cls(states.mean(axis=0), np.maximum(states.std(axis=0), 1e-6))

    @classmethod
    def identity(cls, dim: int) -> "StateNormalizer":
        return cls(np.zeros(dim), np.ones(dim))


def _normalize_batch(batch: Batch, norm: StateNormalizer) -> Batch:
    return Batch(states=norm(batch.states), actions=batch.actions,
                 rewards=batch.rewards, next_states=norm(batch.next_states),
                 dones=batch.dones, returns_to_go=batch.returns_to_go,
                 origins=batch.origins, slots=batch.slots)


def evaluate(policy_fn, spec: EnvSpec, episodes: int, seed: int):
    """Mean and std of undiscounted episode returns under a deterministic policy.

    Per-episode generators are spawned from the base seed, so results do not
    depend on evaluation order or count of prior draws.
    """
    if episodes < 1:
        raise InvalidInputError("episodes must be >= 1")
    children = np.random.SeedSequence(seed).spawn(episodes)
    totals = np.zeros(episodes)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        ep = rollout_episode(spec, lambda s, _rng: policy_fn(s), rng)
        totals[i] = ep[2].sum()
    return float(totals.mean()), float(totals.std())


def reference_returns(spec: EnvSpec):
    """(random_ref, expert_ref) measured from the scripted policies.

    Uses a fixed internal seed so references are identical across runs and
    variants of the same environment.
    """
    refs = []
    for key, quality in enumerate(("random", "expert")):
        children = np.random.SeedSequence((REFERENCE_SEED, key)).spawn(
            REFERENCE_EPISODES)
        totals = []
        for child in children:
            rng = np.random.default_rng(child)
            ep = rollout_episode(
                spec, lambda s, r, q=quality: scripted_policy(spec, s, q, r), rng)
            totals.append(ep[2].sum())
        refs.append(float(np.mean(totals)))
    return refs[0], refs[1]


def normalized_score(mean_return: float, refs) -> float:
    random_ref, expert_ref = refs
    return 100.0 * (mean_return - random_ref) / (expert_ref - random_ref)


class MetricsWriter:
    """Newline-delimited JSON records, one per eval interval."""

    def __init__(self):
        self.records = []

    def add(self, **fields):
        rec = {"v": METRICS_SCHEMA_VERSION}
        rec.update(fields)
        self.records.append(rec)

    def dump(self, path):
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


def _spawn_streams(seed: int, names):
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


OFFLINE_STREAMS = ("agent_init", "diffusion_init", "energy_init",
                   "batch", "update", "diffusion_loop", "energy_loop")
ONLINE_STREAMS = ("env", "explore", "batch", "update", "chain", "energy_update")


@dataclass
class RunArtifacts:
    config: RunConfig
    agent: object
    behavior: BehaviorModel
    energy: EnergyModel
    normalizer: StateNormalizer
    metrics: list
    exchange_counts: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)


def _write_artifacts(out_dir, config, agent, behavior, energy, normalizer,
                     metrics: MetricsWriter, exchange_counts=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config_to_dict(config), f, sort_keys=True, indent=2)
        f.write("\n")
    agent_arrays = agent.state_arrays()
    agent_arrays["norm/mean"] = normalizer.mean
    agent_arrays["norm/std"] = normalizer.std
    save_checkpoint(os.path.join(out_dir, "agent.ckpt"), agent_arrays)
    b_arrays = dict(behavior.eps_net.params)
    b_arrays.update(behavior.optimizer.state_arrays("opt"))
    save_checkpoint(os.path.join(out_dir, "diffusion.ckpt"), b_arrays)
    e_arrays = dict(energy.f_net.params)
    e_arrays.update(energy.optimizer.state_arrays("opt"))
    save_checkpoint(os.path.join(out_dir, "energy.ckpt"), e_arrays)
    metrics.dump(os.path.join(out_dir, "metrics.log"))
    if exchange_counts is not None:
        with open(os.path.join(out_dir, "exchange.log"), "w") as f:
            for c in exchange_counts:
                f.write(f"{c}\n")


def load_agent_checkpoint(config: RunConfig, checkpoint_dir: str):
    env = config.env
    agent = make_agent(env.state_dim, env.action_dim, config.agent,
                       np.random.default_rng(0))
    arrays = load_checkpoint(os.path.join(checkpoint_dir, "agent.ckpt"))
    normalizer = StateNormalizer(arrays["norm/mean"], arrays["norm/std"])
    agent.load_state_arrays(arrays)
    return agent, normalizer


def load_behavior_checkpoint(config: RunConfig, checkpoint_dir: str) -> BehaviorModel:
    env = config.env
    behavior = BehaviorModel.create(env.state_dim, env.action_dim, config.diffusion,
                                    np.random.default_rng(0))
    arrays = load_checkpoint(os.path.join(checkpoint_dir, "diffusion.ckpt"))
    for k in behavior.eps_net.params:
        behavior.eps_net.params[k] = arrays[k].copy()
    behavior.optimizer.load_state_arrays("opt", arrays)
    return behavior


def load_energy_checkpoint(config: RunConfig, checkpoint_dir: str) -> EnergyModel:
    env = config.env
    energy = EnergyModel.create(env.state_dim, env.action_dim, config.diffusion.T,
                                config.energy, np.random.default_rng(0))
    arrays = load_checkpoint(os.path.join(checkpoint_dir, "energy.ckpt"))
    for k in energy.f_net.params:
        energy.f_net.params[k] = arrays[k].copy()
    energy.optimizer.load_state_arrays("opt", arrays)
    return energy


def _load_models(config: RunConfig, checkpoint_dir: str):
    agent, normalizer = load_agent_checkpoint(config, checkpoint_dir)
    behavior = load_behavior_checkpoint(config, checkpoint_dir)
    energy = load_energy_checkpoint(config, checkpoint_dir)
    return agent, behavior, energy, normalizer


def offline_pretrain(config: RunConfig) -> RunArtifacts:
    """Train the agent (base losses), behavior model, and energy net offline.

    Writes checkpoints, the resolved config snapshot, and metrics to
    config.out_dir. Deterministic per seed.
    """
    dataset = load_dataset(config.dataset)
    if dataset.env.name != config.env.name:
        raise InvalidInputError(
            f"dataset env {dataset.env.name!r} does not match config env {config.env.name!r}")
    env = config.env
    normalizer = (StateNormalizer.fit(dataset.states) if config.normalize_states
                  else StateNormalizer.identity(env.state_dim))
    streams = _spawn_streams(config.seed, OFFLINE_STREAMS)
    agent = make_agent(env.state_dim, env.action_dim, config.agent, streams["agent_init"])
    behavior = BehaviorModel.create(env.state_dim, env.action_dim, config.diffusion,
                                    streams["diffusion_init"])
    energy = EnergyModel.create(env.state_dim, env.action_dim, config.diffusion.T,
                                config.energy, streams["energy_init"])
    offline_buf = ReplayBuffer.from_dataset(dataset)
    refs = reference_returns(env)
    metrics = MetricsWriter()
    policy = lambda s: agent.act_deterministic(normalizer(s))

    def record(step, losses, extra=None):
        mean_ret, std_ret = evaluate(policy, env, config.eval_episodes,
                                     seed=config.seed + 1000 + step)
        rec = dict(phase="offline", step=step, global_step=step,
                   eval_return_mean=mean_ret, eval_return_std=std_ret,
                   normalized_score=normalized_score(mean_ret, refs),
                   critic_loss=_mean_or_none(losses.get("critic", [])),
                   value_loss=_mean_or_none(losses.get("value", [])),
                   policy_loss=_mean_or_none(losses.get("policy", [])),
                   diffusion_loss=None, energy_loss=None,
                   exchange_mean=None, exchange_max=None)
        rec.update(extra or {})
        metrics.add(**rec)

    record(0, {})
    window = {"critic": [], "value": [], "policy": []}
    for step in range(config.offline_steps):
        batch = sample_mixed(offline_buf, None, config.batch_size, 1.0, streams["batch"])
        out = agent.update_base(_normalize_batch(batch, normalizer), streams["update"])
        window["critic"].append(out["critic_loss"])
        window["policy"].append(out["policy_loss"])
        if "value_loss" in out:
            window["value"].append(out["value_loss"])
        if (step + 1) % config.eval_every == 0 and (step + 1) < config.offline_steps:
            record(step + 1, window)
            window = {"critic": [], "value": [], "policy": []}

    diffusion_losses = []
    for _ in range(config.diffusion.train_steps):
        idx = streams["diffusion_loop"].integers(0, len(dataset),
                                                 size=config.diffusion.batch_size)
        mini = Batch(states=normalizer(dataset.states[idx]), actions=dataset.actions[idx],
                     rewards=dataset.rewards[idx], next_states=normalizer(dataset.next_states[idx]),
                     dones=dataset.dones[idx], returns_to_go=dataset.returns_to_go[idx],
                     origins=np.zeros(len(idx), dtype=np.int64), slots=idx)
        diffusion_losses.append(behavior_train_step(behavior, mini, streams["diffusion_loop"]))

    q_fn = lambda s, a: agent.q_min(s, a)
    energy_losses = []
    for _ in range(config.energy.train_steps):
        idx = streams["energy_loop"].integers(0, len(dataset), size=config.energy.batch_size)
        energy_losses.append(energy_train_step(
            energy, behavior, q_fn, normalizer(dataset.states[idx]), streams["energy_loop"]))

    record(config.offline_steps, window,
           extra=dict(diffusion_loss=_mean_or_none(diffusion_losses),
                      energy_loss=_mean_or_none(energy_losses)))
    _write_artifacts(config.out_dir, config, agent, behavior, energy, normalizer, metrics)
    return RunArtifacts(config=config, agent=agent, behavior=behavior, energy=energy,
                        normalizer=normalizer, metrics=metrics.records)


def finetune(config: RunConfig, checkpoint_dir: str) -> RunArtifacts:
    """Online fine-tuning from pretrained checkpoints.

    Per environment step: act, store the transition (origin online, zero
    return-to-go), then per UTD iteration sample a mixed batch, generate
    batch actions, update the energy net, score, stratify, cap exchanges,
    and run the stratified agent update. The behavior model stays frozen.
    """
    dataset = load_dataset(config.dataset)
    if dataset.env.name != config.env.name:
        raise InvalidInputError(
            f"dataset env {dataset.env.name!r} does not match config env {config.env.name!r}")
    env = config.env
    agent, behavior, energy, normalizer = _load_models(config, checkpoint_dir)
    acfg = config.agent
    offline_buf = ReplayBuffer.from_dataset(dataset)
    online_buf = ReplayBuffer(config.online_capacity, env.state_dim, env.action_dim,
                              ORIGIN_ONLINE)
    streams = _spawn_streams(config.seed, ONLINE_STREAMS)
    refs = reference_returns(env)
    metrics = MetricsWriter()
    policy = lambda s: agent.act_deterministic(normalizer(s))
    exchange_counts = []
    loss_trace = []
    divergence_warned = False

    def record(step, losses, exchanges):
        mean_ret, std_ret = evaluate(policy, env, config.eval_episodes,
                                     seed=config.seed + 5000 + step)
        metrics.add(phase="online", step=step, global_step=config.offline_steps + step,
                    eval_return_mean=mean_ret, eval_return_std=std_ret,
                    normalized_score=normalized_score(mean_ret, refs),
                    critic_loss=_mean_or_none(losses.get("critic", [])),
                    value_loss=_mean_or_none(losses.get("value", [])),
                    policy_loss=_mean_or_none(losses.get("policy", [])),
                    diffusion_loss=None,
                    energy_loss=_mean_or_none(losses.get("energy", [])),
                    exchange_mean=_mean_or_none(exchanges),
                    exchange_max=max(exchanges) if exchanges else None)

    record(0, {}, [])
    window = {"critic": [], "value": [], "policy": [], "energy": []}
    exchange_window = []
    state = env_reset(env, streams["env"])
    steps_in_episode = 0

    for step in range(config.online_steps):
        if acfg.backbone == "calql":
            action = agent.act(normalizer(state), streams["explore"])
        else:
            action = agent.act(normalizer(state), streams["explore"], config.explore_std)
        next_state, reward, absorbed = env_step(env, state, action)
        steps_in_episode += 1
        done = absorbed or steps_in_episode >= env.horizon
        online_buf.insert(state, np.clip(action, -1.0, 1.0), reward, next_state,
                          done, return_to_go=0.0)
        state = next_state
        if done:
            state = env_reset(env, streams["env"])
            steps_in_episode = 0

        for _ in range(acfg.utd):
            raw = sample_mixed(offline_buf, online_buf, config.batch_size, acfg.rho,
                               streams["batch"])
            batch = _normalize_batch(raw, normalizer)
            n_online = int(np.sum(batch.origins == ORIGIN_ONLINE))
            stratified = acfg.use_stratification and n_online > 0
            guided_next = None
            if stratified:
                def batch_sampler(states, chain_rng):
                    if acfg.use_energy_guidance:
                        return sample_guided(energy, behavior, states, chain_rng)
                    return sample_unguided(behavior, states, chain_rng)

                def update_energy():
                    window["energy"].append(energy_train_step(
                        energy, behavior, lambda s, a: agent.q_min(s, a),
                        batch.states[:config.energy.batch_size],
                        streams["energy_update"]))

                if acfg.use_energy_guidance and config.score_with_updated_energy:
                    update_energy()
                    scores = alignment_scores(batch, batch_sampler, config.sigma_kl,
                                              streams["chain"], config.align_draws)
                else:
                    scores = alignment_scores(batch, batch_sampler, config.sigma_kl,
                                              streams["chain"], config.align_draws)
                    if acfg.use_energy_guidance:
                        update_energy()
                strat = constrain_exchange(stratify(batch, scores, acfg.rho), acfg.n_c)
                if acfg.n_c is not None and strat.exchange_count > acfg.n_c:
                    raise AssertionError("exchange cap violated")
                exchange_counts.append(strat.exchange_count)
                exchange_window.append(strat.exchange_count)
                if acfg.backbone == "iql" and acfg.use_energy_guidance:
                    guided_next = sample_guided(energy, behavior, batch.next_states,
                                                streams["chain"])
            else:
                strat = degenerate_stratification(batch)
            out = agent.update(strat, streams["update"], guided_next)
            window["critic"].append(out["critic_loss"])
            window["policy"].append(out["policy_loss"])
            if "value_loss" in out:
                window["value"].append(out["value_loss"])
                if not divergence_warned and (not np.isfinite(out["value_loss"])
                                              or out["value_loss"] < -1e6):
                    divergence_warned = True
                    metrics.add(phase="online", step=step + 1, event="value_loss_divergence",
                                value_loss=float(out["value_loss"]))
            if config.record_loss_trace:
                loss_trace.append(out)

        if (step + 1) % config.eval_every == 0:
            record(step + 1, window, exchange_window)
            window = {"critic": [], "value": [], "policy": [], "energy": []}
            exchange_window = []

    if config.online_steps % config.eval_every != 0:
        record(config.online_steps, window, exchange_window)
    _write_artifacts(config.out_dir, config, agent, behavior, energy, normalizer,
                     metrics, exchange_counts)
    return RunArtifacts(config=config, agent=agent, behavior=behavior, energy=energy,
                        normalizer=normalizer, metrics=metrics.records,
                        exchange_counts=exchange_counts, loss_trace=loss_trace)
