"""Small MLPs, optimizers, gradient verification, and checkpoint files.

Two execution paths exist deliberately: a raw-numpy forward for sampling loops
and target computations, and a tape-building forward (``forward_t``) for
training losses. ``grad_check`` plus the bitwise unit tests keep them honest.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, InvalidInputError, NumericalError

ACTIVATIONS = ("relu", "silu", "tanh")
FINAL_ACTIVATIONS = ("none", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "relu"
    final_activation: str = "none"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise InvalidInputError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise InvalidInputError(f"unknown final activation {self.final_activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))


@dataclass(frozen=True)
class OptimizerSpec:
    algorithm: str = "adam"  # "adam" | "sgd"
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown optimizer {self.algorithm!r}")
        if self.learning_rate < 0.0:
            raise InvalidInputError("learning_rate must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise InvalidInputError("beta1/beta2 must be in (0, 1)")


def _act_np(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "silu":
        # written as x * sigmoid(x) so the tape path is bitwise identical
        return x * (1.0 / (1.0 + np.exp(-x)))
    return np.tanh(x)


def _act_deriv_np(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-pre))
        return s * (1.0 + pre * (1.0 - s))
    th = np.tanh(pre)
    return 1.0 - th * th


def _act_t(name: str, x):
    if name == "relu":
        return ad.relu(x)
    if name == "silu":
        return ad.silu(x)
    return ad.tanh(x)


def orthogonal(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight init via QR of a Gaussian matrix."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def scaled_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform init in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    """Plain fully connected network. Parameters live in an ordered dict."""

    def __init__(self, spec: MlpSpec, params: dict):
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, init: str = "uniform",
               final_gain: float = 1.0) -> "Mlp":
        dims = (spec.input_dim, *spec.hidden_dims, spec.output_dim)
        params = {}
        n_layers = len(dims) - 1
        for i in range(n_layers):
            shape = (dims[i], dims[i + 1])
            if init == "orthogonal":
                gain = final_gain if i == n_layers - 1 else np.sqrt(2.0)
                w = orthogonal(rng, shape, gain=gain)
            else:
                w = scaled_uniform(rng, shape)
                if i == n_layers - 1:
                    w = w * final_gain
            params[f"W{i}"] = w
            params[f"b{i}"] = np.zeros(dims[i + 1])
        return cls(spec, params)

    @property
    def n_layers(self) -> int:
        return len(self.spec.hidden_dims) + 1

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _check_input(self, x: np.ndarray):
        if x.shape[-1] != self.spec.input_dim:
            raise InvalidInputError(
                f"input dim {x.shape[-1]} != expected {self.spec.input_dim}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < last:
                h = _act_np(self.spec.activation, h)
        if self.spec.final_activation == "tanh":
            h = np.tanh(h)
        return h

    def forward_t(self, x, pt: dict):
        """Tape forward with parameter tensors ``pt`` (see ``lift``)."""
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = ad.matmul(h, pt[f"W{i}"]) + pt[f"b{i}"]
            if i < last:
                h = _act_t(self.spec.activation, h)
        if self.spec.final_activation == "tanh":
            h = ad.tanh(h)
        return h

    def lift(self) -> dict:
        return {k: ad.Tensor(v, requires_grad=True) for k, v in self.params.items()}


def time_embedding_table(T: int, n_freqs: int = 16) -> np.ndarray:
    """Sinusoidal embeddings for integer timesteps 0..T-1, shape (T, 2*n_freqs)."""
    t = np.arange(T, dtype=np.float64)
    freqs = np.exp(-np.log(10000.0) * np.arange(n_freqs) / max(n_freqs - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class SamplingContext:
    """Precomputed contributions and dtype-cast weights for chain evaluation.

    Sampling chains run in float32 by default (the precision is irrelevant
    next to the injected noise, and it roughly halves the dominant matmul
    cost); training paths stay float64.
    """

    __slots__ = ("state_pre", "temb_pre", "weights", "dtype")

    def __init__(self, state_pre: np.ndarray, temb_pre: np.ndarray,
                 weights: dict, dtype):
        self.state_pre = state_pre  # (N, h0): states @ Ws + b0
        self.temb_pre = temb_pre    # (T, h0): embedding table @ We
        self.weights = weights      # remaining layer weights cast to dtype
        self.dtype = dtype


class TimeCondMlp:
    """MLP over (state, x, timestep-embedding) with a split first layer.

    The first layer weight is stored as three blocks (Ws, Wx, We) so the
    state and timestep contributions can be cached across a whole reverse
    chain. Every code path, including training, uses the same split
    arithmetic, which keeps sampling and single-step evaluation bitwise
    consistent.
    """

    def __init__(self, state_dim: int, x_dim: int, hidden_dims, out_dim: int,
                 T: int, params: dict, activation: str = "silu", n_freqs: int = 16):
        self.state_dim = state_dim
        self.x_dim = x_dim
        self.hidden_dims = tuple(hidden_dims)
        self.out_dim = out_dim
        self.T = T
        self.activation = activation
        self.params = params
        self.emb_table = time_embedding_table(T, n_freqs)

    @classmethod
    def create(cls, state_dim: int, x_dim: int, hidden_dims, out_dim: int, T: int,
               rng: np.random.Generator, activation: str = "silu",
               n_freqs: int = 16, final_scale: float = 1.0) -> "TimeCondMlp":
        hidden_dims = tuple(hidden_dims)
        emb_dim = 2 * n_freqs
        in_dim = state_dim + x_dim + emb_dim
        h0 = hidden_dims[0]
        w0 = scaled_uniform(rng, (in_dim, h0))
        params = {
            "Ws": w0[:state_dim].copy(),
            "Wx": w0[state_dim:state_dim + x_dim].copy(),
            "We": w0[state_dim + x_dim:].copy(),
            "b0": np.zeros(h0),
        }
        dims = (*hidden_dims, out_dim)
        for i in range(1, len(dims)):
            w = scaled_uniform(rng, (dims[i - 1], dims[i]))
            if i == len(dims) - 1:
                w = w * final_scale
            params[f"W{i}"] = w
            params[f"b{i}"] = np.zeros(dims[i])
        return cls(state_dim, x_dim, hidden_dims, out_dim, T, params, activation, n_freqs)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def _embed(self, t) -> np.ndarray:
        return self.emb_table[t]

    def forward(self, states: np.ndarray, x: np.ndarray, t) -> np.ndarray:
        """Raw float64 forward; ``t`` is an int or an int array of shape (N,).

        Routed through the same factorized kernel the samplers use (at their
        chosen dtype), so one-off evaluation and chained sampling agree.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.x_dim:
            raise InvalidInputError("x dims do not match the network")
        return self.forward_ctx(self.make_context(states, dtype=np.float64), x, t)

    def forward_t(self, states: np.ndarray, x: np.ndarray, t, pt: dict):
        """Tape forward for training losses; inputs are constants."""
        emb = self._embed(t)
        pre = ad.matmul(ad.Tensor(states), pt["Ws"]) + pt["b0"] \
            + ad.matmul(ad.Tensor(x), pt["Wx"]) + ad.matmul(ad.Tensor(emb), pt["We"])
        h = _act_t(self.activation, pre)
        for i in range(1, self.n_layers):
            h = ad.matmul(h, pt[f"W{i}"]) + pt[f"b{i}"]
            if i < self.n_layers - 1:
                h = _act_t(self.activation, h)
        return h

    def lift(self) -> dict:
        return {k: ad.Tensor(v, requires_grad=True) for k, v in self.params.items()}

    # -- chain fast path ------------------------------------------------------

    def make_context(self, states: np.ndarray, dtype=np.float32) -> SamplingContext:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.state_dim:
            raise InvalidInputError("state dims do not match the network")
        p = self.params
        weights = {"Wx": p["Wx"].astype(dtype)}
        for i in range(1, self.n_layers):
            weights[f"W{i}"] = p[f"W{i}"].astype(dtype)
            weights[f"b{i}"] = p[f"b{i}"].astype(dtype)
        return SamplingContext((states @ p["Ws"] + p["b0"]).astype(dtype),
                               (self.emb_table @ p["We"]).astype(dtype),
                               weights, dtype)

    def forward_ctx(self, ctx: SamplingContext, x: np.ndarray, t: int) -> np.ndarray:
        w = ctx.weights
        pre = ctx.state_pre + x @ w["Wx"] + ctx.temb_pre[t]
        h = _act_np(self.activation, pre)
        for i in range(1, self.n_layers):
            h = h @ w[f"W{i}"] + w[f"b{i}"]
            if i < self.n_layers - 1:
                h = _act_np(self.activation, h)
        return h

    def value_and_x_grad_ctx(self, ctx: SamplingContext, x: np.ndarray, t: int):
        """Scalar-output forward plus gradient w.r.t. ``x`` (hand-rolled backward)."""
        w = ctx.weights
        pres = [ctx.state_pre + x @ w["Wx"] + ctx.temb_pre[t]]
        h = _act_np(self.activation, pres[0])
        for i in range(1, self.n_layers - 1):
            pres.append(h @ w[f"W{i}"] + w[f"b{i}"])
            h = _act_np(self.activation, pres[-1])
        last = self.n_layers - 1
        out = h @ w[f"W{last}"] + w[f"b{last}"]
        g = np.broadcast_to(w[f"W{last}"][:, 0], (x.shape[0], w[f"W{last}"].shape[0]))
        for i in range(self.n_layers - 2, -1, -1):
            g = g * _act_deriv_np(self.activation, pres[i])
            if i > 0:
                g = g @ w[f"W{i}"].T
        return out[:, 0], g @ w["Wx"].T


class Optimizer:
    """SGD or Adam over a named parameter dict, updating in place."""

    def __init__(self, spec: OptimizerSpec, params: dict):
        self.spec = spec
        self.t = 0
        if spec.algorithm == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        else:
            self.m = {}
            self.v = {}

    def step(self, params: dict, grads: dict):
        s = self.spec
        if s.algorithm == "sgd":
            for k in params:
                params[k] -= s.learning_rate * grads[k]
            return
        self.t += 1
        bc1 = 1.0 - s.beta1 ** self.t
        bc2 = 1.0 - s.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = s.beta1 * self.m[k] + (1.0 - s.beta1) * g
            self.v[k] = s.beta2 * self.v[k] + (1.0 - s.beta2) * g * g
            params[k] -= s.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + s.epsilon)

    def state_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}/t": np.array([self.t], dtype=np.int64)}
        for k, v in self.m.items():
            out[f"{prefix}/m/{k}"] = v
        for k, v in self.v.items():
            out[f"{prefix}/v/{k}"] = v
        return out

    def load_state_arrays(self, prefix: str, arrays: dict):
        self.t = int(arrays[f"{prefix}/t"][0])
        for k in self.m:
            self.m[k] = arrays[f"{prefix}/m/{k}"].copy()
            self.v[k] = arrays[f"{prefix}/v/{k}"].copy()


def grad_check(loss_fn, params: dict, probe_count: int, rng: np.random.Generator,
               step: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic (freeze any
    noise before calling). Probes are random unit directions over the full
    parameter vector; the step is scaled by the global parameter norm.
    Returns the max relative error, with an absolute fallback when both
    directional derivatives vanish.
    """
    if probe_count < 1:
        raise InvalidInputError("probe_count must be >= 1")
    base_loss, grads = loss_fn(params)
    if not np.isfinite(base_loss):
        raise NumericalError(f"non-finite loss encountered: {base_loss}")
    pnorm = np.sqrt(sum(float(np.sum(p * p)) for p in params.values()))
    h = step * (1.0 + pnorm)
    worst = 0.0
    for _ in range(probe_count):
        direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
        dnorm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
        direction = {k: d / dnorm for k, d in direction.items()}
        analytic = sum(float(np.sum(grads[k] * direction[k])) for k in params)
        plus = {k: params[k] + h * direction[k] for k in params}
        minus = {k: params[k] - h * direction[k] for k in params}
        lp, _ = loss_fn(plus)
        lm, _ = loss_fn(minus)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericalError("non-finite loss at perturbed parameters")
        fd = (lp - lm) / (2.0 * h)
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst


# -- checkpoint container -----------------------------------------------------

_MAGIC = b"SLCK"
_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1}


def save_checkpoint(path, arrays: dict):
    """Write named tensors to a versioned binary container with a checksum."""
    chunks = [struct.pack("<II", _VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = 0

    def read(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, payload, off)
        off += size
        return vals

    version, count = read("<II")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = read("<H")
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = read("<BB")
        shape = read(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(payload[off:off + nbytes], dtype=dtype).reshape(shape)
        off += nbytes
        arrays[name] = arr.astype(dtype.newbyteorder("=")).copy()
    return arrays
