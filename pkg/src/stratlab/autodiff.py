"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the operations the training losses need. Hot sampling loops do
not build tapes; they use the raw-numpy fast paths in ``nets``. Gradients are
always float64.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    # keep numpy from consuming Tensors in mixed expressions; reflected
    # operators (__radd__ etc.) handle ndarray-Tensor arithmetic instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray):
        if not (self.requires_grad or self._prev or self._backward):
            return  # constant leaf: gradient is never read
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(out: Tensor, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad or p._prev or p._backward for p in parents):
        out._prev = parents
        out._backward = backward
        out.requires_grad = True
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _track(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _track(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; supports numpy's stacked (batched leading axes) form."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data)

    def backward(g):
        a._accumulate(g @ b.data.swapaxes(-1, -2))
        b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _track(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data ** exponent)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _track(out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)

    def backward(g):
        a._accumulate(g * 2.0 * a.data)

    return _track(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward(g):
        a._accumulate(g * out.data)

    return _track(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward(g):
        a._accumulate(g / a.data)

    return _track(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def backward(g):
        a._accumulate(g * (1.0 - out.data * out.data))

    return _track(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))

    def backward(g):
        a._accumulate(g * out.data * (1.0 - out.data))

    return _track(out, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def backward(g):
        a._accumulate(g / (1.0 + np.exp(-a.data)))

    return _track(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _track(out, (a,), backward)


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _track(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.maximum(a.data, b.data))
    mask = a.data >= b.data

    def backward(g):
        a._accumulate(g * mask)
        b._accumulate(g * (~mask))

    return _track(out, (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.minimum(a.data, b.data))
    mask = a.data <= b.data

    def backward(g):
        a._accumulate(g * mask)
        b._accumulate(g * (~mask))

    return _track(out, (a, b), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data))

    def backward(g):
        a._accumulate(g * cond)
        b._accumulate(g * (~cond))

    return _track(out, (a, b), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return _track(out, tuple(tensors), backward)


def take(a, idx) -> Tensor:
    """Indexing/slicing; gradients scatter-add back to the source."""
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _track(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _track(out, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; the shift is a constant so gradients are softmax."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    z = tsum(exp(add(a, -m)), axis=axis, keepdims=True)
    out = add(log(z), m)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accumulate(g * mask)

    return _track(out, (a,), backward)
