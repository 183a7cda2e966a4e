"""Q-derived energy network: contrastive training and guided action sampling.

The scalar net f(s, a_t, t) is trained so that, over K support actions per
state, softmax(-f) matches softmax(beta * Q). A perfectly trained f therefore
tracks the negative soft-value of the noised action, and descending f's
input-gradient tilts the behavior model's samples toward high-Q actions:

    eps_guided = eps_predicted + scale * sigma_t * d f / d a_t
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import DiffusionSchedule, forward_noise, self_normalized_weights
from .diffusion import SAMPLE_DTYPE, BehaviorModel, run_reverse_chain
from .errors import InvalidInputError, NumericalError
from .nets import Optimizer, OptimizerSpec, TimeCondMlp


@dataclass(frozen=True)
class EnergyConfig:
    hidden_dims: tuple = (64, 64)
    n_freqs: int = 16
    learning_rate: float = 3e-4
    beta: float = 3.0           # inverse temperature on Q labels
    guidance_scale: float = 3.0
    K: int = 16                 # support actions per state
    batch_size: int = 16        # states per contrastive step
    train_steps: int = 2000

    def __post_init__(self):
        if self.beta < 0.0:
            raise InvalidInputError("beta must be >= 0")
        if self.K < 2:
            raise InvalidInputError("K must be >= 2")


class EnergyModel:
    def __init__(self, f_net: TimeCondMlp, beta: float, guidance_scale: float,
                 K: int, optimizer: Optimizer):
        self.f_net = f_net
        self.beta = beta
        self.guidance_scale = guidance_scale
        self.K = K
        self.optimizer = optimizer

    @classmethod
    def create(cls, state_dim: int, action_dim: int, T: int, config: EnergyConfig,
               rng: np.random.Generator) -> "EnergyModel":
        net = TimeCondMlp.create(state_dim, action_dim, config.hidden_dims, 1, T,
                                 rng, activation="silu", n_freqs=config.n_freqs)
        opt = Optimizer(OptimizerSpec(learning_rate=config.learning_rate), net.params)
        return cls(net, config.beta, config.guidance_scale, config.K, opt)


def cep_loss_core(energy: EnergyModel, states: np.ndarray, support_actions: np.ndarray,
                  q_values: np.ndarray, t: np.ndarray, eps: np.ndarray,
                  schedule: DiffusionSchedule):
    """Contrastive cross-entropy with frozen noise draws; returns (loss, grads).

    Per state i: targets softmax_k(beta * q_ik) over the K supports, model
    weights softmax_k(-f(s_i, noised support, t_i)); loss is the mean
    cross-entropy.
    """
    m, k, action_dim = support_actions.shape
    if k < 2:
        raise InvalidInputError("need K >= 2 support actions")
    if not np.all(np.isfinite(q_values)):
        raise NumericalError("non-finite q labels")
    targets = self_normalized_weights(energy.beta * q_values)  # (m, k)
    x_t = forward_noise(support_actions, t, eps, schedule)
    states_rep = np.repeat(states, k, axis=0)
    t_rep = np.repeat(t, k)
    pt = energy.f_net.lift()
    f = energy.f_net.forward_t(states_rep, x_t.reshape(m * k, action_dim), t_rep, pt)
    logits = ad.reshape(-f, (m, k))
    log_model = logits - ad.logsumexp(logits, axis=1, keepdims=True)
    loss = ad.tmean(ad.tsum(ad.mul(log_model, -targets), axis=1))
    loss.backward()
    return loss.item(), {key: p.grad for key, p in pt.items()}


def cep_loss(energy: EnergyModel, states: np.ndarray, support_actions: np.ndarray,
             q_values: np.ndarray, schedule: DiffusionSchedule,
             rng: np.random.Generator) -> float:
    """Sample one timestep per state and K noises, then evaluate the loss.

    No parameter update happens here.
    """
    m, k, action_dim = support_actions.shape
    t = rng.integers(0, schedule.T, size=m)
    eps = rng.standard_normal((m, k, action_dim))
    loss, _ = cep_loss_core(energy, states, support_actions, q_values, t, eps, schedule)
    return loss


def sample_support_actions(behavior: BehaviorModel, states: np.ndarray, k: int,
                           rng: np.random.Generator) -> np.ndarray:
    """K unguided behavior-model samples per state, shape (m, K, action_dim)."""
    m = states.shape[0]
    tiled = np.repeat(states, k, axis=0)
    flat = run_reverse_chain(behavior, tiled, rng, guidance_fn=None)
    return flat.reshape(m, k, behavior.action_dim)


def energy_train_step(energy: EnergyModel, behavior: BehaviorModel, q_fn,
                      states: np.ndarray, rng: np.random.Generator) -> float:
    """One contrastive update against the current Q labels.

    Support actions come from the unguided behavior model so the labels stay
    on-support for the modeled policy. ``q_fn(states, actions) -> (n,)``.
    """
    m = states.shape[0]
    k = energy.K
    supports = sample_support_actions(behavior, states, k, rng)
    flat = supports.reshape(m * k, behavior.action_dim)
    q = np.asarray(q_fn(np.repeat(states, k, axis=0), flat), dtype=np.float64).reshape(m, k)
    t = rng.integers(0, behavior.schedule.T, size=m)
    eps = rng.standard_normal((m, k, behavior.action_dim))
    loss, grads = cep_loss_core(energy, states, supports, q, t, eps, behavior.schedule)
    if not np.isfinite(loss):
        raise NumericalError("energy training loss is not finite; step aborted")
    energy.optimizer.step(energy.f_net.params, grads)
    return loss


def guidance_term(energy: EnergyModel, states: np.ndarray, a_t: np.ndarray, t: int,
                  schedule: DiffusionSchedule) -> np.ndarray:
    """scale * sigma_t * df/da_t, to be added to the predicted noise.

    Since softmax(-f) is trained against softmax(beta * Q), f falls where the
    soft value rises; adding sigma_t * df/da_t to the noise estimate moves the
    reverse update toward higher-Q actions.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
    ctx = energy.f_net.make_context(states, dtype=np.float64)
    _, grad = energy.f_net.value_and_x_grad_ctx(ctx, a_t, t)
    out = energy.guidance_scale * schedule.sigma(t) * grad
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite guidance gradient")
    return out


def sample_guided(energy: EnergyModel, behavior: BehaviorModel, states: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """Full reverse chain with energy guidance injected at every step.

    With guidance_scale == 0 this is bitwise identical to unguided sampling
    on the same rng stream.
    """
    single = np.asarray(states).ndim == 1
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if energy.guidance_scale == 0.0:
        out = run_reverse_chain(behavior, states, rng, guidance_fn=None)
        return out[0] if single else out
    ctx = energy.f_net.make_context(states, dtype=SAMPLE_DTYPE)
    coeff = (energy.guidance_scale
             * np.sqrt(1.0 - behavior.schedule.alpha_bars)).astype(SAMPLE_DTYPE)

    def guide(a_t, t):
        _, grad = energy.f_net.value_and_x_grad_ctx(ctx, a_t, t)
        return coeff[t] * grad

    out = run_reverse_chain(behavior, states, rng, guidance_fn=guide)
    return out[0] if single else out
