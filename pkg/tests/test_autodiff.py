"""Finite-difference checks for every tape op; the engine's own oracle."""

import numpy as np
import pytest

from stratlab import autodiff as ad


def fd_grad(fn, x, h=1e-6):
    """Central finite differences of a scalar fn at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = fn(x)
        flat[i] = orig - h
        lm = fn(x)
        flat[i] = orig
        gf[i] = (lp - lm) / (2 * h)
    return g


def check_unary(op, x, tol=1e-6):
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = ad.tsum(ad.mul(op(t), np.arange(1.0, x.size + 1).reshape(x.shape)))
    out.backward()
    ana = t.grad
    num = fd_grad(lambda v: float(np.sum(op(ad.Tensor(v)).data * np.arange(1.0, x.size + 1).reshape(x.shape))), x.copy())
    assert np.allclose(ana, num, atol=tol), f"{op.__name__} gradient mismatch"


@pytest.mark.parametrize("op", [ad.exp, ad.tanh, ad.sigmoid, ad.softplus, ad.relu, ad.silu, ad.square])
def test_unary_ops(op):
    rng = np.random.default_rng(0)
    check_unary(op, rng.standard_normal((3, 4)) * 0.7 + 0.1)


def test_log_grad():
    rng = np.random.default_rng(1)
    check_unary(ad.log, rng.uniform(0.3, 3.0, (3, 4)))


def test_matmul_grad():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    ta = ad.Tensor(a.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    loss = ad.tsum(ad.square(ad.matmul(ta, tb)))
    loss.backward()
    na = fd_grad(lambda v: float(np.sum((v @ b) ** 2)), a.copy())
    nb = fd_grad(lambda v: float(np.sum((a @ v) ** 2)), b.copy())
    assert np.allclose(ta.grad, na, atol=1e-5)
    assert np.allclose(tb.grad, nb, atol=1e-5)


def test_add_mul_broadcasting():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)

    def loss_np(av, bv):
        return float(np.sum((av * bv + bv) ** 2))

    ta = ad.Tensor(a.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    loss = ad.tsum(ad.square(ad.add(ad.mul(ta, tb), tb)))
    loss.backward()
    na = fd_grad(lambda v: loss_np(v, b), a.copy())
    nb = fd_grad(lambda v: loss_np(a, v), b.copy())
    assert np.allclose(ta.grad, na, atol=1e-5)
    assert np.allclose(tb.grad, nb, atol=1e-5)


def test_minimum_maximum_where():
    rng = np.random.default_rng(4)
    a = rng.standard_normal(10)
    b = rng.standard_normal(10)
    cond = a > 0
    ta = ad.Tensor(a.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    loss = ad.tsum(ad.minimum(ta, tb) + ad.maximum(ta, tb) + ad.where(cond, ta, tb))
    loss.backward()
    # min + max = a + b so those contribute grad 1 to each; where adds cond masks
    assert np.allclose(ta.grad, 1.0 + cond.astype(float))
    assert np.allclose(tb.grad, 1.0 + (~cond).astype(float))


def test_concat_take_reshape():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((4, 2))
    b = rng.standard_normal((4, 3))
    ta = ad.Tensor(a.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    cat = ad.concat([ta, tb], axis=1)
    sub = ad.take(cat, (slice(None), slice(1, 4)))
    loss = ad.tsum(ad.square(ad.reshape(sub, (12,))))
    loss.backward()
    na = fd_grad(lambda v: float(np.sum(np.concatenate([v, b], 1)[:, 1:4] ** 2)), a.copy())
    nb = fd_grad(lambda v: float(np.sum(np.concatenate([a, v], 1)[:, 1:4] ** 2)), b.copy())
    assert np.allclose(ta.grad, na, atol=1e-5)
    assert np.allclose(tb.grad, nb, atol=1e-5)


def test_take_fancy_index_accumulates():
    a = np.array([1.0, 2.0, 3.0])
    ta = ad.Tensor(a, requires_grad=True)
    idx = np.array([0, 0, 2])
    loss = ad.tsum(ad.take(ta, idx))
    loss.backward()
    assert np.allclose(ta.grad, [2.0, 0.0, 1.0])


def test_logsumexp_matches_softmax_grad():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 4)) * 3
    tx = ad.Tensor(x.copy(), requires_grad=True)
    out = ad.tsum(ad.logsumexp(tx, axis=1))
    out.backward()
    soft = np.exp(x - x.max(1, keepdims=True))
    soft /= soft.sum(1, keepdims=True)
    assert np.allclose(tx.grad, soft, atol=1e-10)
    # value check
    assert np.allclose(out.data, np.sum(np.log(np.sum(np.exp(x), axis=1))))


def test_mean_and_axis_sum():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4))
    tx = ad.Tensor(x.copy(), requires_grad=True)
    loss = ad.tmean(ad.tsum(ad.square(tx), axis=1))
    loss.backward()
    assert np.allclose(tx.grad, 2 * x / 3)


def test_clip_grad_mask():
    x = np.array([-2.0, -0.5, 0.5, 2.0])
    tx = ad.Tensor(x, requires_grad=True)
    loss = ad.tsum(ad.clip(tx, -1.0, 1.0))
    loss.backward()
    assert np.allclose(tx.grad, [0.0, 1.0, 1.0, 0.0])


def test_grad_accumulates_over_reuse():
    x = np.array([2.0])
    tx = ad.Tensor(x, requires_grad=True)
    y = ad.mul(tx, tx)  # x^2, both parents the same tensor
    y.backward()
    assert np.allclose(tx.grad, [4.0])


def test_backward_requires_scalar():
    tx = ad.Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.square(tx).backward()


def test_constants_carry_no_tape():
    a = ad.Tensor(np.ones(3))
    b = ad.Tensor(np.ones(3))
    out = ad.add(a, b)
    assert out._backward is None and out._prev == ()
