import numpy as np
import pytest

from stratlab import autodiff as ad
from stratlab.errors import CheckpointError, InvalidInputError
from stratlab.nets import (
    Mlp,
    MlpSpec,
    Optimizer,
    OptimizerSpec,
    TimeCondMlp,
    grad_check,
    load_checkpoint,
    orthogonal,
    save_checkpoint,
    time_embedding_table,
)


def test_zero_weight_network_outputs_zero():
    spec = MlpSpec(3, (8, 8), 2)
    net = Mlp.create(spec, np.random.default_rng(0))
    for k in net.params:
        net.params[k][:] = 0.0
    out = net.forward(np.random.default_rng(1).standard_normal((5, 3)))
    assert np.all(out == 0.0)


def test_identity_linear_network():
    spec = MlpSpec(4, (), 4)
    net = Mlp.create(spec, np.random.default_rng(0))
    net.params["W0"] = np.eye(4)
    net.params["b0"][:] = 0.0
    x = np.random.default_rng(2).standard_normal((7, 4))
    assert np.allclose(net.forward(x), x)


def test_forward_deterministic():
    spec = MlpSpec(5, (16, 16), 3, activation="silu", final_activation="tanh")
    net = Mlp.create(spec, np.random.default_rng(7))
    x = np.random.default_rng(8).standard_normal((4, 5))
    a = net.forward(x)
    b = net.forward(x)
    assert np.array_equal(a, b)


def test_forward_rejects_wrong_dim():
    net = Mlp.create(MlpSpec(3, (4,), 2), np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        net.forward(np.zeros((2, 5)))


def test_tape_forward_matches_raw_forward():
    for act in ("relu", "silu", "tanh"):
        spec = MlpSpec(4, (12, 12), 3, activation=act, final_activation="tanh")
        net = Mlp.create(spec, np.random.default_rng(3))
        x = np.random.default_rng(4).standard_normal((6, 4))
        raw = net.forward(x)
        taped = net.forward_t(x, net.lift()).data
        assert np.array_equal(raw, taped)


def test_orthogonal_init_is_orthogonal():
    w = orthogonal(np.random.default_rng(5), (16, 16))
    assert np.allclose(w.T @ w, np.eye(16), atol=1e-10)
    w2 = orthogonal(np.random.default_rng(6), (32, 8))
    assert np.allclose(w2.T @ w2, np.eye(8), atol=1e-10)


def test_mlp_spec_validation():
    with pytest.raises(InvalidInputError):
        MlpSpec(0, (4,), 2)
    with pytest.raises(InvalidInputError):
        MlpSpec(2, (4,), 2, activation="gelu")


def test_param_count_reported():
    net = Mlp.create(MlpSpec(3, (8,), 2), np.random.default_rng(0))
    assert net.param_count() == 3 * 8 + 8 + 8 * 2 + 2


# -- grad_check ---------------------------------------------------------------

def test_grad_check_quadratic_exact():
    def loss(params):
        w = params["w"]
        return float(np.sum(w * w)), {"w": 2.0 * w}

    err = grad_check(loss, {"w": np.array([3.0])}, probe_count=3,
                     rng=np.random.default_rng(0))
    assert err < 1e-8


def test_grad_check_constant_function():
    def loss(params):
        return 1.0, {"w": np.zeros_like(params["w"])}

    err = grad_check(loss, {"w": np.array([1.0, 2.0])}, probe_count=2,
                     rng=np.random.default_rng(0))
    assert err == 0.0


def test_grad_check_detects_wrong_gradient():
    def loss(params):
        w = params["w"]
        return float(np.sum(w * w)), {"w": 3.0 * w}  # wrong factor

    err = grad_check(loss, {"w": np.array([1.0, -2.0])}, probe_count=3,
                     rng=np.random.default_rng(0))
    assert err > 1e-2


def test_grad_check_mlp_mse():
    # finite-difference oracle on a random 2-layer net with MSE loss
    spec = MlpSpec(4, (8, 8), 2, activation="silu")
    net = Mlp.create(spec, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    x = rng.standard_normal((16, 4))
    y = rng.standard_normal((16, 2))

    def loss(params):
        pt = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        pred = net.forward_t(x, pt)
        l = ad.tmean(ad.square(pred - ad.Tensor(y)))
        l.backward()
        return l.item(), {k: t.grad for k, t in pt.items()}

    err = grad_check(loss, net.params, probe_count=5, rng=np.random.default_rng(12))
    assert err < 1e-4


# -- optimizer ----------------------------------------------------------------

def test_zero_learning_rate_leaves_params_bitwise_unchanged():
    for algo in ("adam", "sgd"):
        params = {"w": np.random.default_rng(0).standard_normal((4, 4))}
        before = {k: v.copy() for k, v in params.items()}
        opt = Optimizer(OptimizerSpec(algorithm=algo, learning_rate=0.0), params)
        for _ in range(3):
            opt.step(params, {"w": np.ones((4, 4))})
        assert np.array_equal(params["w"], before["w"])


def test_sgd_step_formula():
    params = {"w": np.array([1.0, 2.0])}
    opt = Optimizer(OptimizerSpec(algorithm="sgd", learning_rate=0.1), params)
    opt.step(params, {"w": np.array([1.0, -1.0])})
    assert np.allclose(params["w"], [0.9, 2.1])


def test_adam_first_step_is_signed_lr():
    # with bias correction the first Adam step is ~lr * sign(g)
    params = {"w": np.array([0.0, 0.0])}
    opt = Optimizer(OptimizerSpec(algorithm="adam", learning_rate=0.01), params)
    opt.step(params, {"w": np.array([5.0, -3.0])})
    assert np.allclose(params["w"], [-0.01, 0.01], atol=1e-6)


def test_optimizer_state_roundtrip(tmp_path):
    params = {"w": np.random.default_rng(1).standard_normal(5)}
    opt = Optimizer(OptimizerSpec(), params)
    for i in range(4):
        opt.step(params, {"w": np.full(5, 0.1 * (i + 1))})
    path = tmp_path / "opt.ckpt"
    save_checkpoint(path, opt.state_arrays("opt"))
    opt2 = Optimizer(OptimizerSpec(), params)
    opt2.load_state_arrays("opt", load_checkpoint(path))
    assert opt2.t == opt.t
    assert np.array_equal(opt2.m["w"], opt.m["w"])
    assert np.array_equal(opt2.v["w"], opt.v["w"])


# -- time-conditioned net -------------------------------------------------------

def test_time_embedding_shape_and_range():
    table = time_embedding_table(100, 16)
    assert table.shape == (100, 32)
    assert np.all(np.abs(table) <= 1.0)
    # distinct timesteps embed distinctly
    assert not np.allclose(table[0], table[1])


def test_timecond_forward_ctx_matches_forward_bitwise():
    net = TimeCondMlp.create(2, 2, (16, 16), 2, T=50, rng=np.random.default_rng(13))
    rng = np.random.default_rng(14)
    s = rng.standard_normal((8, 2))
    x = rng.standard_normal((8, 2))
    ctx64 = net.make_context(s, dtype=np.float64)
    ctx32 = net.make_context(s)  # sampling default
    for t in (0, 7, 49):
        direct = net.forward(s, x, t)
        assert np.array_equal(direct, net.forward_ctx(ctx64, x, t))
        fast32 = net.forward_ctx(ctx32, x.astype(np.float32), t)
        assert fast32.dtype == np.float32
        assert np.allclose(direct, fast32, atol=1e-5)


def test_timecond_tape_matches_raw():
    # the tape path recomputes the embedding contribution instead of using the
    # cached table, so agreement is to float precision rather than bitwise
    net = TimeCondMlp.create(3, 2, (8, 8), 2, T=20, rng=np.random.default_rng(15))
    rng = np.random.default_rng(16)
    s = rng.standard_normal((5, 3))
    x = rng.standard_normal((5, 2))
    t = np.array([0, 3, 19, 7, 7])
    raw = net.forward(s, x, t)
    taped = net.forward_t(s, x, t, net.lift()).data
    assert np.allclose(raw, taped, atol=1e-13)


def test_timecond_x_grad_matches_fd():
    net = TimeCondMlp.create(2, 2, (12, 12), 1, T=30, rng=np.random.default_rng(17))
    rng = np.random.default_rng(18)
    s = rng.standard_normal((4, 2))
    x = rng.standard_normal((4, 2))
    ctx = net.make_context(s, dtype=np.float64)
    val, grad = net.value_and_x_grad_ctx(ctx, x, 5)
    assert val.shape == (4,) and grad.shape == (4, 2)
    h = 1e-6
    for i in range(4):
        for j in range(2):
            xp = x.copy(); xp[i, j] += h
            xm = x.copy(); xm[i, j] -= h
            fd = (net.forward_ctx(ctx, xp, 5)[i, 0] - net.forward_ctx(ctx, xm, 5)[i, 0]) / (2 * h)
            assert abs(grad[i, j] - fd) < 1e-6


# -- checkpoint format ----------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(19)
    arrays = {
        "net/W0": rng.standard_normal((4, 8)),
        "net/b0": rng.standard_normal(8),
        "counter": np.array([42], dtype=np.int64),
        "scalar": np.array(3.14),
    }
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == arrays[k].dtype


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.arange(10.0)})
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
