"""Alignment scoring and batch partition into offline-like / online-like strata.

Scores measure how far each batch action sits from an action the guided
sampler generates for the same state; low score = offline-like. The partition
keeps the mixing ratio rho, and an optional cap bounds how many samples may
land in a stratum that differs from their buffer of origin.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import kl_alignment
from .errors import InvalidInputError
from .replay import ORIGIN_OFFLINE, Batch


@dataclass
class StratifiedBatch:
    batch: Batch
    scores: np.ndarray
    off_idx: np.ndarray    # positions within the batch assigned offline-like
    on_idx: np.ndarray
    exchange_count: int

    @property
    def n_off(self) -> int:
        return len(self.off_idx)

    @property
    def n_on(self) -> int:
        return len(self.on_idx)


def alignment_scores(batch: Batch, sampler, sigma_kl: float,
                     rng: np.random.Generator, n_draws: int = 1) -> np.ndarray:
    """Generated-action distance per sample; low means offline-like.

    ``sampler(states, rng) -> actions`` is the (usually energy-guided)
    sampling capability. One draw per state by default; with ``n_draws > 1``
    the score is the mean distance over independent draws.
    """
    if n_draws < 1:
        raise InvalidInputError("n_draws must be >= 1")
    total = kl_alignment(batch.actions, sampler(batch.states, rng), sigma_kl)
    for _ in range(n_draws - 1):
        total = total + kl_alignment(batch.actions, sampler(batch.states, rng), sigma_kl)
    return total / n_draws


def stratify(batch: Batch, scores: np.ndarray, rho: float) -> StratifiedBatch:
    """Ascending stable sort by score; the lowest floor(rho*N) become b_off.

    Ties break by origin (offline first), then by original batch position.
    """
    n = len(batch)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n,):
        raise InvalidInputError(f"need {n} scores, got shape {scores.shape}")
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError(f"rho must be in [0, 1], got {rho}")
    origin_rank = (batch.origins != ORIGIN_OFFLINE).astype(np.int64)
    order = np.lexsort((np.arange(n), origin_rank, scores))
    n_off = int(np.floor(rho * n))
    off_idx = order[:n_off]
    on_idx = order[n_off:]
    return StratifiedBatch(batch=batch, scores=scores, off_idx=off_idx,
                           on_idx=on_idx, exchange_count=_count_exchanges(batch, off_idx, on_idx))


def _count_exchanges(batch: Batch, off_idx: np.ndarray, on_idx: np.ndarray) -> int:
    off_cross = int(np.sum(batch.origins[off_idx] != ORIGIN_OFFLINE))
    on_cross = int(np.sum(batch.origins[on_idx] == ORIGIN_OFFLINE))
    return off_cross + on_cross


def constrain_exchange(strat: StratifiedBatch, n_c) -> StratifiedBatch:
    """Cap the number of samples whose stratum differs from their origin.

    When stratum sizes match origin counts (the normal case, since the batch
    sampler and the stratifier share the floor(rho*N) convention), crossings
    come in pairs, one per side. The cap keeps the floor(n_c / 2) most
    confident pairs, ranking each side's crossings by distance of their score
    from the batch median, and swaps the rest back to their origin-aligned
    stratum. Unpairable (count-forced) crossings cannot be reverted without
    breaking stratum sizes and are left in place. ``n_c=None`` means unlimited.
    """
    if n_c is None:
        return strat
    if n_c < 0:
        raise InvalidInputError("n_c must be >= 0 or None")
    batch, scores = strat.batch, strat.scores
    off_idx, on_idx = strat.off_idx.copy(), strat.on_idx.copy()
    cross_off = np.flatnonzero(batch.origins[off_idx] != ORIGIN_OFFLINE)
    cross_on = np.flatnonzero(batch.origins[on_idx] == ORIGIN_OFFLINE)
    pairs = min(len(cross_off), len(cross_on))
    keep = min(n_c // 2, pairs)
    if pairs == keep:
        return strat
    median = np.median(scores)
    conf_off = np.abs(scores[off_idx[cross_off]] - median)
    conf_on = np.abs(scores[on_idx[cross_on]] - median)
    # least confident crossings first; those get swapped home pairwise
    revert_off = cross_off[np.argsort(conf_off, kind="stable")][:pairs - keep]
    revert_on = cross_on[np.argsort(conf_on, kind="stable")][:pairs - keep]
    off_idx[revert_off], on_idx[revert_on] = on_idx[revert_on], off_idx[revert_off]
    return replace(strat, off_idx=off_idx, on_idx=on_idx,
                   exchange_count=_count_exchanges(batch, off_idx, on_idx))


def degenerate_stratification(batch: Batch) -> StratifiedBatch:
    """Route every sample through the offline-like branch (stratification off)."""
    n = len(batch)
    return StratifiedBatch(batch=batch, scores=np.zeros(n),
                           off_idx=np.arange(n), on_idx=np.arange(0),
                           exchange_count=0)
