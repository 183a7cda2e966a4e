"""Cal-QL and IQL agents: base losses, stratified variants, and actor updates.

Both backbones keep double critics with polyak-averaged targets and use
min(q1, q2) wherever a single Q appears inside a target. The two critics are
stored stacked along a leading axis and evaluated as one batched matmul
chain. Loss functions are split into deterministic cores that accept
pre-drawn noise, so finite-difference checks can re-evaluate them at
perturbed parameters, and update methods that draw the noise and step the
optimizers.

Stratified losses take a StratifiedBatch; the base behavior is recovered
exactly by routing the whole batch through the offline-like branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfigError, InvalidInputError
from .nets import Mlp, MlpSpec, Optimizer, OptimizerSpec, orthogonal
from .replay import ORIGIN_OFFLINE, Batch
from .stratify import StratifiedBatch, degenerate_stratification

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class AgentConfig:
    backbone: str = "calql"          # "calql" | "iql"
    alpha: float = 10.0              # conservative regularizer weight
    tau_expectile: float = 0.7
    tau_online: float = 0.99
    beta_awr: float = 3.0
    awr_clip: float = 100.0
    gamma: float = 0.99
    polyak: float = 0.005
    rho: float = 0.5
    use_stratification: bool = True
    use_energy_guidance: bool = True
    use_expectile_online: bool = True   # False selects the raw-residual value loss
    n_c: object = None                  # int cap or None for unlimited
    utd: int = 1
    max_q_samples: int = 10
    max_target_backup: bool = False
    n_reg_samples: int = 4              # policy draws per state in the regularizer
    hidden_dims: tuple = (64, 64)
    policy_lr: float = 1e-4
    critic_lr: float = 3e-4

    def __post_init__(self):
        if self.backbone not in ("calql", "iql"):
            raise InvalidConfigError(f"unknown backbone {self.backbone!r}")
        if self.alpha < 0.0:
            raise InvalidConfigError("alpha must be >= 0")
        if not (0.0 < self.tau_expectile < 1.0 and 0.0 < self.tau_online <= 1.0):
            raise InvalidConfigError("expectile levels must lie in (0, 1]")
        if self.utd < 1:
            raise InvalidConfigError("utd must be >= 1")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))


def default_agent_config(backbone: str, sparse: bool, **overrides) -> AgentConfig:
    """Per-environment defaults mirroring the dense / sparse conventions."""
    base = dict(backbone=backbone)
    if backbone == "calql":
        base.update(alpha=5.0 if sparse else 10.0, max_target_backup=sparse,
                    policy_lr=1e-4, critic_lr=3e-4)
    else:
        base.update(tau_expectile=0.9 if sparse else 0.7,
                    beta_awr=10.0 if sparse else 3.0,
                    policy_lr=3e-4, critic_lr=3e-4)
    base.update(overrides)
    return AgentConfig(**base)


def _lift(params: dict) -> dict:
    return {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}


def _lift_frozen(params: dict) -> dict:
    return {k: ad.Tensor(v) for k, v in params.items()}


class DoubleCritic:
    """Two MLP critics stacked on a leading axis of every parameter."""

    def __init__(self, dims: tuple, params: dict):
        self.dims = dims
        self.params = params

    @classmethod
    def create(cls, input_dim: int, hidden_dims: tuple, rng: np.random.Generator,
               final_gain: float = 0.01) -> "DoubleCritic":
        dims = (input_dim, *hidden_dims, 1)
        params = {}
        for i in range(len(dims) - 1):
            gain = final_gain if i == len(dims) - 2 else np.sqrt(2.0)
            params[f"W{i}"] = np.stack([orthogonal(rng, (dims[i], dims[i + 1]), gain)
                                        for _ in range(2)])
            params[f"b{i}"] = np.zeros((2, 1, dims[i + 1]))
        return cls(dims, params)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def clone(self) -> "DoubleCritic":
        return DoubleCritic(self.dims, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(n, input_dim) -> (2, n) raw values for both critics."""
        h = x
        for i in range(self.n_layers):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h[:, :, 0]

    def forward_t(self, x, pt: dict):
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))
        for i in range(self.n_layers):
            h = ad.matmul(h, pt[f"W{i}"]) + pt[f"b{i}"]
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return ad.reshape(h, h.shape[:2])

    def min_forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).min(axis=0)


class AgentBase:
    def __init__(self, state_dim: int, action_dim: int, config: AgentConfig,
                 rng: np.random.Generator):
        self.config = config
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.critics = DoubleCritic.create(state_dim + action_dim,
                                           config.hidden_dims, rng)
        self.critics_target = self.critics.clone()
        self.opt_critics = Optimizer(OptimizerSpec(learning_rate=config.critic_lr),
                                     self.critics.params)

    # -- shared helpers -------------------------------------------------------

    def q_min(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """min over the online critics; used for energy labels."""
        return self.critics.min_forward(np.concatenate([states, actions], axis=1))

    def q_min_target(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.critics_target.min_forward(np.concatenate([states, actions], axis=1))

    def soft_update(self, polyak=None):
        """target <- (1 - polyak) * target + polyak * online, parameterwise."""
        p = self.config.polyak if polyak is None else polyak
        if not 0.0 < p <= 1.0:
            raise InvalidInputError("polyak must be in (0, 1]")
        for k in self.critics.params:
            self.critics_target.params[k] = ((1.0 - p) * self.critics_target.params[k]
                                             + p * self.critics.params[k])

    def _named_params(self):
        return {"critics": self.critics.params, "critics_target": self.critics_target.params}

    def _named_opts(self):
        return {"opt_critics": self.opt_critics}

    def state_arrays(self) -> dict:
        out = {}
        for name, params in self._named_params().items():
            for k, v in params.items():
                out[f"{name}/{k}"] = v
        for name, opt in self._named_opts().items():
            out.update(opt.state_arrays(name))
        return out

    def load_state_arrays(self, arrays: dict):
        for name, params in self._named_params().items():
            for k in params:
                params[k] = arrays[f"{name}/{k}"].copy()
        for name, opt in self._named_opts().items():
            opt.load_state_arrays(name, arrays)


class CalQlAgent(AgentBase):
    """Conservative critic with a return-calibrated regularizer and a
    tanh-Gaussian actor whose entropy temperature is tuned automatically."""

    def __init__(self, state_dim, action_dim, config, rng):
        super().__init__(state_dim, action_dim, config, rng)
        pol_spec = MlpSpec(state_dim, config.hidden_dims, 2 * action_dim, activation="relu")
        self.policy = Mlp.create(pol_spec, rng, init="orthogonal", final_gain=0.01)
        self.log_alpha = np.zeros(1)
        self.target_entropy = -float(action_dim)
        self.opt_policy = Optimizer(OptimizerSpec(learning_rate=config.policy_lr),
                                    self.policy.params)
        self.opt_alpha = Optimizer(OptimizerSpec(learning_rate=config.policy_lr),
                                   {"log_alpha": self.log_alpha})

    # -- policy ----------------------------------------------------------------

    def policy_stats(self, states: np.ndarray):
        out = self.policy.forward(states)
        mean = out[:, :self.action_dim]
        log_std = np.clip(out[:, self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample_actions(self, states: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Squashed-Gaussian samples with pre-drawn unit noise ``xi``."""
        mean, log_std = self.policy_stats(states)
        if xi.ndim == 3:
            mean = mean[:, None, :]
            log_std = log_std[:, None, :]
        return np.tanh(mean + np.exp(log_std) * xi)

    def act(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        xi = rng.standard_normal((1, self.action_dim))
        return self.sample_actions(state[None], xi)[0]

    def act_deterministic(self, state: np.ndarray) -> np.ndarray:
        mean, _ = self.policy_stats(state[None])
        return np.tanh(mean)[0]

    def _named_params(self):
        named = super()._named_params()
        named["policy"] = self.policy.params
        return named

    def _named_opts(self):
        opts = super()._named_opts()
        opts.update({"opt_policy": self.opt_policy, "opt_alpha": self.opt_alpha})
        return opts

    def state_arrays(self):
        out = super().state_arrays()
        out["log_alpha"] = self.log_alpha
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.log_alpha = arrays["log_alpha"].copy()
        self.opt_alpha = Optimizer(OptimizerSpec(learning_rate=self.config.policy_lr),
                                   {"log_alpha": self.log_alpha})
        self.opt_alpha.load_state_arrays("opt_alpha", arrays)

    # -- updates ----------------------------------------------------------------

    def update(self, strat: StratifiedBatch, rng: np.random.Generator,
               guided_next: np.ndarray = None) -> dict:
        """One critic + actor + temperature + target update.

        Noise draw order: target-backup xi, regularizer xi, actor xi. The
        degenerate all-offline stratification reproduces the base backbone.
        """
        batch = strat.batch
        n = len(batch)
        cfg = self.config
        m = cfg.max_q_samples if cfg.max_target_backup else 1
        xi_next = rng.standard_normal((n, m, self.action_dim))
        xi_reg = rng.standard_normal((n, cfg.n_reg_samples, self.action_dim))
        xi_actor = rng.standard_normal((n, self.action_dim))
        critic_loss, grads, reg_value = calql_critic_loss_strat(
            self, strat, xi_next, xi_reg)
        self.opt_critics.step(self.critics.params, grads)
        actor_loss, g_pol, alpha_loss, g_alpha = sac_policy_loss(
            self, batch.states, xi_actor)
        self.opt_policy.step(self.policy.params, g_pol)
        self.opt_alpha.step({"log_alpha": self.log_alpha}, {"log_alpha": g_alpha})
        self.soft_update()
        return {"critic_loss": critic_loss, "policy_loss": actor_loss,
                "alpha_loss": alpha_loss, "calql_regularizer": reg_value,
                "entropy_temperature": float(np.exp(self.log_alpha[0]))}

    def update_base(self, batch: Batch, rng: np.random.Generator) -> dict:
        return self.update(degenerate_stratification(batch), rng)


class IqlAgent(AgentBase):
    """Expectile value learning with TD critics and advantage-weighted
    behavior cloning for the actor (deterministic-mean Gaussian policy)."""

    def __init__(self, state_dim, action_dim, config, rng):
        super().__init__(state_dim, action_dim, config, rng)
        v_spec = MlpSpec(state_dim, config.hidden_dims, 1, activation="relu")
        self.value = Mlp.create(v_spec, rng, init="orthogonal", final_gain=0.01)
        pol_spec = MlpSpec(state_dim, config.hidden_dims, action_dim,
                           activation="relu", final_activation="tanh")
        self.policy = Mlp.create(pol_spec, rng, init="orthogonal", final_gain=0.01)
        self.log_std = np.full(action_dim, -1.0)
        self.opt_value = Optimizer(OptimizerSpec(learning_rate=config.critic_lr),
                                   self.value.params)
        self.opt_policy = Optimizer(OptimizerSpec(learning_rate=config.policy_lr),
                                    self.policy.params)
        self.opt_log_std = Optimizer(OptimizerSpec(learning_rate=config.policy_lr),
                                     {"log_std": self.log_std})

    def value_of(self, states: np.ndarray) -> np.ndarray:
        return self.value.forward(states)[:, 0]

    def policy_mean(self, states: np.ndarray) -> np.ndarray:
        return self.policy.forward(states)

    def sample_actions(self, states: np.ndarray, xi: np.ndarray) -> np.ndarray:
        mean = self.policy_mean(states)
        if xi.ndim == 3:
            mean = mean[:, None, :]
        return np.clip(mean + np.exp(self.log_std) * xi, -1.0, 1.0)

    def act(self, state: np.ndarray, rng: np.random.Generator,
            explore_std: float = 0.1) -> np.ndarray:
        mean = self.policy_mean(state[None])[0]
        return np.clip(mean + explore_std * rng.standard_normal(self.action_dim),
                       -1.0, 1.0)

    def act_deterministic(self, state: np.ndarray) -> np.ndarray:
        return self.policy_mean(state[None])[0]

    def _named_params(self):
        named = super()._named_params()
        named.update({"value": self.value.params, "policy": self.policy.params})
        return named

    def _named_opts(self):
        opts = super()._named_opts()
        opts.update({"opt_value": self.opt_value, "opt_policy": self.opt_policy,
                     "opt_log_std": self.opt_log_std})
        return opts

    def state_arrays(self):
        out = super().state_arrays()
        out["log_std"] = self.log_std
        return out

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.log_std = arrays["log_std"].copy()
        self.opt_log_std = Optimizer(OptimizerSpec(learning_rate=self.config.policy_lr),
                                     {"log_std": self.log_std})
        self.opt_log_std.load_state_arrays("opt_log_std", arrays)

    def update(self, strat: StratifiedBatch, rng: np.random.Generator,
               guided_next: np.ndarray = None) -> dict:
        """Value, critic, actor, and target updates in that order."""
        batch = strat.batch
        n = len(batch)
        cfg = self.config
        m = max(cfg.max_q_samples - (1 if guided_next is not None else 0), 1)
        xi_next = rng.standard_normal((n, m, self.action_dim))
        if cfg.use_expectile_online:
            value_loss, g_v = iql_value_loss_strat(self, strat)
        else:
            value_loss, g_v = iql_value_loss_adv(self, strat)
        self.opt_value.step(self.value.params, g_v)
        q_loss, g_q = iql_q_loss_strat(self, strat, xi_next, guided_next)
        self.opt_critics.step(self.critics.params, g_q)
        policy_loss, g_pol, g_std = awr_policy_loss(self, batch)
        self.opt_policy.step(self.policy.params, g_pol)
        self.opt_log_std.step({"log_std": self.log_std}, {"log_std": g_std})
        self.soft_update()
        return {"value_loss": value_loss, "critic_loss": q_loss,
                "policy_loss": policy_loss}

    def update_base(self, batch: Batch, rng: np.random.Generator) -> dict:
        return self.update(degenerate_stratification(batch), rng)


def make_agent(state_dim: int, action_dim: int, config: AgentConfig,
               rng: np.random.Generator):
    cls = CalQlAgent if config.backbone == "calql" else IqlAgent
    return cls(state_dim, action_dim, config, rng)


# -- Cal-QL losses --------------------------------------------------------------

def calql_regularizer_t(agent: CalQlAgent, pt: dict, states: np.ndarray,
                        dataset_actions: np.ndarray, rtg_values: np.ndarray,
                        policy_actions: np.ndarray):
    """Tape version of the calibrated conservative penalty, averaged over the
    two critics:

        R = E_s[ mean_k max(Q(s, a_k), rtg(s)) ] - E_(s,a)[ Q(s, a) ]

    ``policy_actions`` has shape (n, k, action_dim) and is treated as a
    constant (no gradient flows into the actor from here).
    """
    n, k, action_dim = policy_actions.shape
    s_rep = np.repeat(states, k, axis=0)
    x_pi = np.concatenate([s_rep, policy_actions.reshape(n * k, action_dim)], axis=1)
    x_data = np.concatenate([states, dataset_actions], axis=1)
    q_pi = agent.critics.forward_t(x_pi, pt)                      # (2, n*k)
    clamped = ad.maximum(q_pi, ad.Tensor(np.repeat(rtg_values, k)))
    q_data = agent.critics.forward_t(x_data, pt)                  # (2, n)
    per_critic = ad.tmean(clamped, axis=1) - ad.tmean(q_data, axis=1)
    return ad.tmean(per_critic)


def calql_regularizer(agent: CalQlAgent, states: np.ndarray,
                      dataset_actions: np.ndarray, rtg_values: np.ndarray,
                      rng: np.random.Generator, n_samples: int = None) -> float:
    """Value of the conservative penalty with fresh policy samples."""
    k = n_samples or agent.config.n_reg_samples
    xi = rng.standard_normal((len(states), k, agent.action_dim))
    policy_actions = agent.sample_actions(states, xi)
    return calql_regularizer_t(agent, _lift_frozen(agent.critics.params), states,
                               dataset_actions, rtg_values, policy_actions).item()


def _calql_td_target(agent: CalQlAgent, batch: Batch, xi_next: np.ndarray) -> np.ndarray:
    """r + gamma * (1 - done) * max-over-samples min-target-Q at s'."""
    n, m, action_dim = xi_next.shape
    next_actions = agent.sample_actions(batch.next_states, xi_next)
    s_rep = np.repeat(batch.next_states, m, axis=0)
    q_next = agent.q_min_target(s_rep, next_actions.reshape(n * m, action_dim))
    q_best = q_next.reshape(n, m).max(axis=1)
    return batch.rewards + agent.config.gamma * (~batch.dones) * q_best


def calql_critic_loss_strat(agent: CalQlAgent, strat: StratifiedBatch,
                            xi_next: np.ndarray, xi_reg: np.ndarray):
    """TD over the whole batch plus the regularizer gated to b_off.

    The regularizer averages over the offline-origin members of b_off (online
    transitions carry no behavior return, so they are excluded from the
    calibration reference) and is scaled by |b_off| / N. Returns
    (loss, critic_grads, regularizer_value).
    """
    batch = strat.batch
    n = len(batch)
    if n == 0:
        raise InvalidInputError("empty batch")
    cfg = agent.config
    y = _calql_td_target(agent, batch, xi_next)
    x = np.concatenate([batch.states, batch.actions], axis=1)
    pt = _lift(agent.critics.params)
    q = agent.critics.forward_t(x, pt)                            # (2, n)
    loss = ad.tsum(ad.tmean(ad.square(q - ad.Tensor(y)), axis=1)) * 0.5
    reg_value = 0.0
    eligible = strat.off_idx[batch.origins[strat.off_idx] == ORIGIN_OFFLINE]
    if cfg.alpha > 0.0 and len(eligible) > 0:
        reg_actions = agent.sample_actions(batch.states, xi_reg)
        reg = calql_regularizer_t(
            agent, pt, batch.states[eligible], batch.actions[eligible],
            batch.returns_to_go[eligible], reg_actions[eligible])
        reg_value = reg.item()
        loss = loss + reg * (cfg.alpha * strat.n_off / n)
    loss.backward()
    return loss.item(), {k: t.grad for k, t in pt.items()}, reg_value


def calql_critic_loss_base(agent: CalQlAgent, batch: Batch, xi_next: np.ndarray,
                           xi_reg: np.ndarray):
    """The unstratified conservative loss: every sample sits in b_off."""
    return calql_critic_loss_strat(agent, degenerate_stratification(batch),
                                   xi_next, xi_reg)


def _tanh_gaussian_logprob(u, log_std, xi: np.ndarray):
    """log pi(a|s) for a = tanh(u), u = mean + exp(log_std) * xi (tape)."""
    base = ad.tsum(-0.5 * (xi * xi + LOG_2PI) - log_std, axis=1)
    correction = ad.tsum(2.0 * (np.log(2.0) - u - ad.softplus(-2.0 * u)), axis=1)
    return base - correction


def sac_policy_loss(agent: CalQlAgent, states: np.ndarray, xi: np.ndarray):
    """Reparameterized actor loss plus the temperature update quantities.

    Returns (actor_loss, policy_grads, alpha_loss, alpha_grad). The entropy
    temperature maximizes E[-alpha * (log pi + target_entropy)] with log pi
    detached.
    """
    pt = agent.policy.lift()
    out = agent.policy.forward_t(states, pt)
    mean = ad.take(out, (slice(None), slice(0, agent.action_dim)))
    log_std = ad.clip(ad.take(out, (slice(None), slice(agent.action_dim, None))),
                      LOG_STD_MIN, LOG_STD_MAX)
    u = mean + ad.exp(log_std) * xi
    actions = ad.tanh(u)
    logp = _tanh_gaussian_logprob(u, log_std, xi)
    x = ad.concat([ad.Tensor(states), actions], axis=1)
    q_both = agent.critics.forward_t(x, _lift_frozen(agent.critics.params))
    q = ad.minimum(ad.take(q_both, 0), ad.take(q_both, 1))
    alpha = float(np.exp(agent.log_alpha[0]))
    loss = ad.tmean(alpha * logp - q)
    loss.backward()
    logp_val = logp.data
    alpha_loss = float(-alpha * np.mean(logp_val + agent.target_entropy))
    alpha_grad = np.array([-alpha * np.mean(logp_val + agent.target_entropy)])
    return loss.item(), {k: t.grad for k, t in pt.items()}, alpha_loss, alpha_grad


# -- IQL losses -------------------------------------------------------------------

def _require_iql(agent):
    if agent.config.backbone != "iql":
        raise InvalidConfigError("operation requires the iql backbone")


def _stratum_tau(agent: IqlAgent, strat: StratifiedBatch) -> np.ndarray:
    tau = np.full(len(strat.batch), agent.config.tau_expectile)
    tau[strat.on_idx] = agent.config.tau_online
    return tau


def iql_value_loss_strat(agent: IqlAgent, strat: StratifiedBatch):
    """Expectile residual loss with the stratum-dependent expectile level."""
    _require_iql(agent)
    batch = strat.batch
    q = agent.q_min_target(batch.states, batch.actions)
    tau = _stratum_tau(agent, strat)
    pt = agent.value.lift()
    v = ad.reshape(agent.value.forward_t(batch.states, pt), (len(batch),))
    u = ad.Tensor(q) - v
    weight = np.where(u.data < 0.0, 1.0 - tau, tau)
    loss = ad.tmean(ad.square(u) * weight)
    loss.backward()
    return loss.item(), {k: t.grad for k, t in pt.items()}


def iql_value_loss_adv(agent: IqlAgent, strat: StratifiedBatch):
    """Variant without the expectile on online-like samples: their residual
    enters raw (signed), which is unbounded below; divergence is the caller's
    concern."""
    _require_iql(agent)
    batch = strat.batch
    q = agent.q_min_target(batch.states, batch.actions)
    tau = agent.config.tau_expectile
    on_mask = np.zeros(len(batch), dtype=bool)
    on_mask[strat.on_idx] = True
    pt = agent.value.lift()
    v = ad.reshape(agent.value.forward_t(batch.states, pt), (len(batch),))
    u = ad.Tensor(q) - v
    weight = np.where(u.data < 0.0, 1.0 - tau, tau)
    loss = ad.tmean(ad.where(on_mask, u, ad.square(u) * weight))
    loss.backward()
    return loss.item(), {k: t.grad for k, t in pt.items()}


def iql_q_loss_strat(agent: IqlAgent, strat: StratifiedBatch,
                     xi_next: np.ndarray, guided_next: np.ndarray = None):
    """Per-stratum TD targets: V(s') for b_off, sampled-max target-Q for b_on.

    The continuous max is approximated over ``xi_next``-driven policy samples
    plus an optional externally generated action per state (the energy-guided
    draw). Returns (loss, critic_grads).
    """
    _require_iql(agent)
    batch = strat.batch
    n, m, action_dim = xi_next.shape
    v_next = agent.value_of(batch.next_states)
    candidates = agent.sample_actions(batch.next_states, xi_next)
    if guided_next is not None:
        candidates = np.concatenate([candidates, guided_next[:, None, :]], axis=1)
        m += 1
    s_rep = np.repeat(batch.next_states, m, axis=0)
    q_next = agent.q_min_target(s_rep, candidates.reshape(n * m, action_dim))
    q_best = q_next.reshape(n, m).max(axis=1)
    on_mask = np.zeros(n, dtype=bool)
    on_mask[strat.on_idx] = True
    backup = np.where(on_mask, q_best, v_next)
    y = batch.rewards + agent.config.gamma * (~batch.dones) * backup
    x = np.concatenate([batch.states, batch.actions], axis=1)
    pt = _lift(agent.critics.params)
    q = agent.critics.forward_t(x, pt)
    loss = ad.tsum(ad.tmean(ad.square(q - ad.Tensor(y)), axis=1))
    loss.backward()
    return loss.item(), {k: t.grad for k, t in pt.items()}


def awr_policy_loss(agent: IqlAgent, batch: Batch):
    """Advantage-weighted negative log likelihood of the batch actions.

    Weights are exp(beta * (min target Q - V)) clipped at awr_clip, so they
    always lie in (0, awr_clip]. Returns (loss, policy_grads, log_std_grad).
    """
    _require_iql(agent)
    weights = awr_weights(agent, batch)
    pt = agent.policy.lift()
    ls = ad.Tensor(agent.log_std, requires_grad=True)
    mean = agent.policy.forward_t(batch.states, pt)
    z = (ad.Tensor(batch.actions) - mean) * ad.exp(-ls)
    nll = ad.tsum(0.5 * ad.square(z) + ls + 0.5 * LOG_2PI, axis=1)
    loss = ad.tmean(nll * weights)
    loss.backward()
    return loss.item(), {k: t.grad for k, t in pt.items()}, ls.grad


def awr_weights(agent: IqlAgent, batch: Batch) -> np.ndarray:
    q = agent.q_min_target(batch.states, batch.actions)
    v = agent.value_of(batch.states)
    return np.minimum(np.exp(np.minimum(agent.config.beta_awr * (q - v), 50.0)),
                      agent.config.awr_clip)
