"""State-conditional diffusion model of the behavior policy.

Training matches predicted noise against the true forward-process noise;
sampling runs the discrete-time ancestral reverse chain. The guidance hook in
``ddpm_reverse_step`` is an additive term on the predicted noise so the energy
module can steer sampling without this module knowing about energies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import DiffusionSchedule, forward_noise, make_schedule
from .errors import NumericalError
from .nets import Optimizer, OptimizerSpec, TimeCondMlp

INTERMEDIATE_CLIP = 1.2  # slightly outside the action box to keep score gradients alive
SAMPLE_DTYPE = np.float32  # chain arithmetic dtype; training stays float64


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 100
    schedule: str = "cosine"  # "cosine" | "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    hidden_dims: tuple = (64, 64)
    n_freqs: int = 16
    learning_rate: float = 3e-4
    batch_size: int = 256
    train_steps: int = 5000


class BehaviorModel:
    def __init__(self, eps_net: TimeCondMlp, schedule: DiffusionSchedule,
                 optimizer: Optimizer):
        self.eps_net = eps_net
        self.schedule = schedule
        self.optimizer = optimizer

    @classmethod
    def create(cls, state_dim: int, action_dim: int, config: DiffusionConfig,
               rng: np.random.Generator) -> "BehaviorModel":
        schedule = make_schedule(config.schedule, config.T, config.beta_min, config.beta_max)
        net = TimeCondMlp.create(state_dim, action_dim, config.hidden_dims,
                                 action_dim, config.T, rng, activation="silu",
                                 n_freqs=config.n_freqs)
        opt = Optimizer(OptimizerSpec(learning_rate=config.learning_rate), net.params)
        return cls(net, schedule, opt)

    @property
    def action_dim(self) -> int:
        return self.eps_net.x_dim


def behavior_loss(model: BehaviorModel, states: np.ndarray, actions: np.ndarray,
                  t: np.ndarray, eps: np.ndarray):
    """Noise-prediction loss with frozen draws; returns (loss, grads).

    loss = mean_i || eps_net(s_i, a_t_i, t_i) - eps_i ||^2
    """
    a_t = forward_noise(actions, t, eps, model.schedule)
    pt = model.eps_net.lift()
    pred = model.eps_net.forward_t(states, a_t, t, pt)
    loss = ad.tmean(ad.tsum(ad.square(pred - ad.Tensor(eps)), axis=1))
    loss.backward()
    return loss.item(), {k: p.grad for k, p in pt.items()}


def behavior_train_step(model: BehaviorModel, batch, rng: np.random.Generator) -> float:
    """One optimizer step of noise-prediction training on ``batch``."""
    n = len(batch.states)
    t = rng.integers(0, model.schedule.T, size=n)
    eps = rng.standard_normal(batch.actions.shape)
    loss, grads = behavior_loss(model, batch.states, batch.actions, t, eps)
    if not np.isfinite(loss):
        raise NumericalError("behavior training loss is not finite; step aborted")
    model.optimizer.step(model.eps_net.params, grads)
    return loss


def posterior_step(schedule: DiffusionSchedule, a_t: np.ndarray, t: int,
                   eps_hat: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestral reverse update given the (possibly guided) noise estimate.

    Uses sigma_t^2 = beta_t transition noise (the smaller posterior variance
    measurably underdisperses samples at T = 100). Adds no noise at t = 0 and
    clips intermediates just outside the action box.
    """
    dt = a_t.dtype.type
    beta_t = dt(schedule.betas[t])
    abar_t = dt(schedule.alpha_bars[t])
    one = dt(1.0)
    mean = (a_t - (beta_t / np.sqrt(one - abar_t)) * eps_hat) / np.sqrt(one - beta_t)
    if t > 0:
        mean = mean + np.sqrt(beta_t) * rng.standard_normal(a_t.shape).astype(dt, copy=False)
    out = np.clip(mean, -INTERMEDIATE_CLIP, INTERMEDIATE_CLIP)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite intermediate in reverse diffusion step")
    return out


def ddpm_reverse_step(model: BehaviorModel, states: np.ndarray, a_t: np.ndarray,
                      t: int, guidance_term, rng: np.random.Generator) -> np.ndarray:
    """One reverse step a_t -> a_{t-1}; ``guidance_term`` adds to the noise estimate.

    Pass 0 (or a zero array) for unguided sampling. Accepts (N, d) batches or
    single vectors.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    single = np.asarray(a_t).ndim == 1
    a_t = np.atleast_2d(np.asarray(a_t)).astype(SAMPLE_DTYPE, copy=False)
    ctx = model.eps_net.make_context(states, dtype=SAMPLE_DTYPE)
    eps_hat = model.eps_net.forward_ctx(ctx, a_t, t) + np.asarray(
        guidance_term, dtype=SAMPLE_DTYPE)
    out = posterior_step(model.schedule, a_t, t, eps_hat, rng)
    return out[0] if single else out


def run_reverse_chain(model: BehaviorModel, states: np.ndarray,
                      rng: np.random.Generator, guidance_fn=None) -> np.ndarray:
    """Full reverse chain from pure noise for a batch of states.

    ``guidance_fn(a_t, t) -> (N, action_dim)`` supplies an additive noise-term
    per step; None means unguided. The rng stream is consumed identically
    either way, so zero guidance reproduces unguided samples bitwise.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    ctx = model.eps_net.make_context(states, dtype=SAMPLE_DTYPE)
    a = rng.standard_normal((n, model.action_dim)).astype(SAMPLE_DTYPE)
    for t in range(model.schedule.T - 1, -1, -1):
        eps_hat = model.eps_net.forward_ctx(ctx, a, t)
        if guidance_fn is not None:
            eps_hat = eps_hat + guidance_fn(a, t)
        a = posterior_step(model.schedule, a, t, eps_hat, rng)
    return np.clip(a, -1.0, 1.0).astype(np.float64)


def sample_unguided(model: BehaviorModel, states: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Sample behavior-like actions; final output clipped to the action box."""
    single = np.asarray(states).ndim == 1
    out = run_reverse_chain(model, states, rng, guidance_fn=None)
    return out[0] if single else out
