"""Schedules, loss primitives, and distance functions shared by every other module.

Everything here is a pure function of its arguments; no global state, safe to
call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Discrete-time noise schedule.

    ``alpha(t)`` is the per-step signal scale sqrt(alpha_bar_t) and
    ``sigma(t)`` the noise level sqrt(1 - alpha_bar_t), so a noised sample is
    x_t = alpha(t) * x_0 + sigma(t) * eps with eps ~ N(0, I).
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise InvalidInputError(f"betas must have shape ({self.T},), got {betas.shape}")
        if not np.all((betas > 0.0) & (betas <= 0.999)):
            raise InvalidInputError("betas must lie in (0, 0.999]")
        alpha_bars = np.cumprod(1.0 - betas)
        if not np.all(np.diff(alpha_bars) < 0.0):
            raise InvalidInputError("alpha_bars must be strictly decreasing")
        # alpha_t^2 + sigma_t^2 = 1 holds by construction; assert to 1e-12 anyway.
        closure = np.abs(alpha_bars + (1.0 - alpha_bars) - 1.0)
        if np.any(closure > 1e-12):
            raise InvalidInputError("schedule violates alpha^2 + sigma^2 = 1")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def alpha(self, t):
        return np.sqrt(self.alpha_bars[t])

    def sigma(self, t):
        return np.sqrt(1.0 - self.alpha_bars[t])


def linear_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule."""
    return DiffusionSchedule(T=T, betas=np.linspace(beta_min, beta_max, T))


def cosine_schedule(T: int = 100, s: float = 0.008) -> DiffusionSchedule:
    """Cosine alpha-bar schedule; the desk-scale default.

    Drives alpha_bar_T to ~0 at T = 100 (a rescaled linear schedule leaves
    measurable signal at the terminal step, which biases ancestral sampling).
    """
    x = np.linspace(0.0, T, T + 1)
    ab = np.cos((x / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
    ab = ab / ab[0]
    betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    return DiffusionSchedule(T=T, betas=betas)


def make_schedule(kind: str, T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    if kind == "cosine":
        return cosine_schedule(T)
    if kind == "linear":
        return linear_schedule(T, beta_min, beta_max)
    raise InvalidInputError(f"unknown schedule kind {kind!r}")


def expectile_loss(u, tau: float):
    """Asymmetric squared loss |tau - 1{u < 0}| * u^2.

    tau = 0.5 gives the symmetric 0.5 * u^2; tau -> 1 approaches max-regression.
    Accepts scalars or arrays; the subgradient at the kink u = 0 is taken as 0.
    """
    if not 0.0 < tau < 1.0:
        raise InvalidInputError(f"tau must be in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0.0, 1.0 - tau, tau)
    return weight * u * u


def expectile_weight(u, tau: float):
    """The |tau - 1{u < 0}| factor of ``expectile_loss``, for gradient reuse."""
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0.0, 1.0 - tau, tau)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Forward-noising step: x_t = alpha_t * x0 + sigma_t * eps.

    ``t`` may be an int (one timestep for the whole array) or an int array
    broadcastable against x0's leading axes.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InvalidInputError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise InvalidInputError(f"timestep out of range [0, {schedule.T})")
    alpha = schedule.alpha(t_arr)
    sigma = schedule.sigma(t_arr)
    if t_arr.ndim > 0:
        alpha = alpha.reshape(t_arr.shape + (1,) * (x0.ndim - t_arr.ndim))
        sigma = sigma.reshape(t_arr.shape + (1,) * (x0.ndim - t_arr.ndim))
    return alpha * x0 + sigma * eps


def kl_alignment(a: np.ndarray, a_hat: np.ndarray, sigma_kl: float = 0.1):
    """Alignment score between a batch action and a generated action.

    Both points are read as isotropic Gaussians with shared bandwidth
    sigma_kl, which collapses the divergence to ||a - a_hat||^2 / (2 sigma_kl^2).
    Rankings over a sample set are therefore invariant to sigma_kl. Accepts a
    single pair of vectors or (N, d) batches; returns a scalar or an (N,) array.
    """
    if sigma_kl <= 0.0:
        raise InvalidInputError(f"sigma_kl must be positive, got {sigma_kl}")
    a = np.asarray(a, dtype=np.float64)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    if a.shape != a_hat.shape:
        raise InvalidInputError(f"action shape {a.shape} != generated shape {a_hat.shape}")
    diff = a - a_hat
    return np.sum(diff * diff, axis=-1) / (2.0 * sigma_kl * sigma_kl)


def self_normalized_weights(values: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, computed with max-subtraction.

    Output rows sum to 1 and are invariant to adding a constant to all inputs.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] < 2:
        raise InvalidInputError("need at least 2 values to normalize")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("values must be finite")
    shifted = values - np.max(values, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)
