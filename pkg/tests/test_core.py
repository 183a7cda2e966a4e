import numpy as np
import pytest

from stratlab.core import (
    DiffusionSchedule,
    expectile_loss,
    forward_noise,
    kl_alignment,
    linear_schedule,
    self_normalized_weights,
)
from stratlab.errors import InvalidInputError


def test_expectile_loss_pinned_values():
    assert expectile_loss(1.0, 0.7) == pytest.approx(0.7)
    assert expectile_loss(-1.0, 0.7) == pytest.approx(0.3)
    assert expectile_loss(2.0, 0.5) == pytest.approx(2.0)


def test_expectile_loss_symmetric_at_half():
    rng = np.random.default_rng(0)
    u = rng.standard_normal(100) * 3
    assert np.allclose(expectile_loss(u, 0.5), 0.5 * u * u)


def test_expectile_loss_tau_mirror():
    rng = np.random.default_rng(1)
    for _ in range(50):
        u = rng.standard_normal()
        tau = rng.uniform(0.01, 0.99)
        assert expectile_loss(u, tau) == pytest.approx(expectile_loss(-u, 1.0 - tau))


def test_expectile_loss_rejects_bad_tau():
    with pytest.raises(InvalidInputError):
        expectile_loss(1.0, 0.0)
    with pytest.raises(InvalidInputError):
        expectile_loss(1.0, 1.0)


def test_schedule_invariants():
    sched = linear_schedule()
    assert sched.T == 100
    assert np.all(sched.betas > 0) and np.all(sched.betas <= 0.999)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    closure = sched.alpha(np.arange(100)) ** 2 + sched.sigma(np.arange(100)) ** 2
    assert np.all(np.abs(closure - 1.0) < 1e-12)


def test_schedule_rejects_bad_betas():
    with pytest.raises(InvalidInputError):
        DiffusionSchedule(T=3, betas=np.array([0.1, -0.1, 0.1]))
    with pytest.raises(InvalidInputError):
        DiffusionSchedule(T=2, betas=np.array([0.5, 1.5]))


def test_forward_noise_direct_formula():
    # schedule with alpha_bar chosen so alpha=0.8, sigma=0.6 at t=1
    betas = np.array([0.2, 1.0 - 0.64 / 0.8])
    sched = DiffusionSchedule(T=2, betas=betas)
    assert sched.alpha(1) == pytest.approx(0.8)
    assert sched.sigma(1) == pytest.approx(0.6)
    out = forward_noise(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), sched)
    assert np.allclose(out, [0.8, 0.6])


def test_forward_noise_limits():
    # near-zero noise level keeps x0; near-total noise keeps eps
    sched = DiffusionSchedule(T=2, betas=np.array([1e-12, 0.999]))
    x0 = np.array([0.5, -0.5])
    out0 = forward_noise(x0, 0, np.array([3.0, -7.0]), sched)
    assert np.allclose(out0, x0, atol=1e-5)
    low = DiffusionSchedule(T=1, betas=np.array([0.999]))
    eps = np.array([1.0, 0.0])
    out1 = forward_noise(np.array([0.3, 0.4]), 0, eps, low)
    assert np.allclose(out1, np.sqrt(0.999) * eps + np.sqrt(0.001) * np.array([0.3, 0.4]))


def test_forward_noise_batched_timesteps():
    sched = linear_schedule()
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((5, 2))
    eps = rng.standard_normal((5, 2))
    t = np.array([0, 10, 50, 99, 3])
    out = forward_noise(x0, t, eps, sched)
    for i in range(5):
        assert np.allclose(out[i], forward_noise(x0[i], int(t[i]), eps[i], sched))


def test_forward_noise_dim_mismatch():
    sched = linear_schedule()
    with pytest.raises(InvalidInputError):
        forward_noise(np.zeros(2), 0, np.zeros(3), sched)


def test_kl_alignment_pinned_values():
    assert kl_alignment(np.array([1.0, 0.5]), np.array([1.0, 0.5]), 1.0) == 0.0
    assert kl_alignment(np.array([1.0, 0.0]), np.array([0.0, 0.0]), 1.0) == pytest.approx(0.5)
    assert kl_alignment(np.array([1.0, 1.0]), np.array([0.0, 0.0]), 0.1) == pytest.approx(100.0)


def test_kl_alignment_ranking_invariant_to_bandwidth():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.standard_normal((32, 2))
        a_hat = rng.standard_normal((32, 2))
        s1 = kl_alignment(a, a_hat, 0.1)
        s2 = kl_alignment(a, a_hat, 1.0)
        assert np.array_equal(np.argsort(s1, kind="stable"), np.argsort(s2, kind="stable"))


def test_kl_alignment_dim_mismatch():
    with pytest.raises(InvalidInputError):
        kl_alignment(np.zeros(2), np.zeros(3), 0.1)


def test_self_normalized_weights_pinned_values():
    assert np.allclose(self_normalized_weights(np.array([0.0, 0.0])), [0.5, 0.5])
    assert np.allclose(self_normalized_weights(np.full(4, 7.3)), [0.25] * 4)
    w = self_normalized_weights(np.array([np.log(3.0), 0.0]))
    assert np.allclose(w, [0.75, 0.25])


def test_self_normalized_weights_properties():
    rng = np.random.default_rng(4)
    for _ in range(50):
        v = rng.standard_normal(8) * 10
        w = self_normalized_weights(v)
        assert abs(np.sum(w) - 1.0) < 1e-9
        shifted = self_normalized_weights(v + rng.uniform(-100, 100))
        assert np.allclose(w, shifted, atol=1e-12)


def test_self_normalized_weights_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        self_normalized_weights(np.array([1.0]))
    with pytest.raises(InvalidInputError):
        self_normalized_weights(np.array([1.0, np.inf]))
    with pytest.raises(InvalidInputError):
        self_normalized_weights(np.array([1.0, np.nan]))
