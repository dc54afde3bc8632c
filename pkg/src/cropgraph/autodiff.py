"""Dense-tensor math with reverse-mode differentiation.

Every trainable layer in this package runs on the small autodiff engine
defined here. Operations record a dynamic graph: each result holds its parent
tensors plus a closure mapping the output gradient to parent gradients, and
``backward`` walks the graph once in reverse topological order. Gradients
accumulate additively, so using one Parameter in several places simply sums
the contributions.

Storage is numpy. float64 is the default and what the documented test
tolerances assume; float32 is available for faster training runs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """Layer or parameter wiring is inconsistent (e.g. broken dimension chain)."""


class UsageError(ValueError):
    """An operation was called in a way its contract forbids."""


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients.

    Tensors are immutable by convention after construction. ``grad`` starts as
    None and is filled in (accumulating across backward passes) by
    ``backward``.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, dtype=None, _parents=(), _vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar; all defer to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """A named leaf tensor whose gradient persists across backward passes."""

    __slots__ = ("name",)

    def __init__(self, value, name: str, dtype=None):
        super().__init__(value, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def make_param(name: str, shape, seed: int, fan_in: int | None = None,
               dtype=None) -> Parameter:
    """Create a Parameter initialised uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    The RNG stream is keyed on (seed, name) so the draw for one parameter does
    not depend on creation order, which keeps partially shared model
    configurations bit-identical where their shapes agree.
    """
    shape = tuple(int(s) for s in shape)
    if fan_in is None:
        if len(shape) < 2:
            raise ConfigurationError(
                f"fan_in required for parameter {name!r} with shape {shape}")
        fan_in = shape[0]
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode("utf8"))])
    bound = 1.0 / np.sqrt(float(fan_in))
    data = rng.uniform(-bound, bound, size=shape)
    return Parameter(data, name, dtype=dtype or DEFAULT_DTYPE)


def zeros_param(name: str, shape, dtype=None) -> Parameter:
    return Parameter(np.zeros(shape), name, dtype=dtype or DEFAULT_DTYPE)


def ones_param(name: str, shape, dtype=None) -> Parameter:
    return Parameter(np.ones(shape), name, dtype=dtype or DEFAULT_DTYPE)


def _coerce(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _topo_order(root: Tensor):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(node) into ``.grad`` for every node reachable from out."""
    if out.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {out.shape}")
    order = _topo_order(out)
    seed = np.ones_like(out.data)
    out.grad = seed if out.grad is None else out.grad + seed
    for node in reversed(order):
        if node._vjp is None or not node._parents:
            continue
        grads = node._vjp(node.grad)
        for parent, pg in zip(node._parents, grads):
            if pg is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a)
    out = a.data + b.data
    return Tensor(out, _parents=(a, b),
                  _vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a)
    out = a.data - b.data
    return Tensor(out, _parents=(a, b),
                  _vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a)
    out = a.data * b.data
    return Tensor(out, _parents=(a, b),
                  _vjp=lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b, a)
    out = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return Tensor(out, _parents=(a, b), _vjp=vjp)


def neg(a) -> Tensor:
    a = _coerce(a)
    return Tensor(-a.data, _parents=(a,), _vjp=lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes, broadcasting leading axes."""
    a, b = _coerce(a), _coerce(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return Tensor(out, _parents=(a, b), _vjp=vjp)


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), _parents=(a,),
                  _vjp=lambda g: (g.transpose(inv),))


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    return Tensor(a.data.reshape(shape), _parents=(a,),
                  _vjp=lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a)
    return Tensor(np.broadcast_to(a.data, shape).copy(), _parents=(a,),
                  _vjp=lambda g: (_unbroadcast(g, a.shape),))


def concat(parts, axis=0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(out, _parents=tuple(parts),
                  _vjp=lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = _coerce(a)
    out = a.data[idx]
    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)
    return Tensor(out, _parents=(a,), _vjp=vjp)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,),
                  _vjp=lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _coerce(a)
    y = np.tanh(a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _coerce(a)
    y = np.exp(a.data)
    return Tensor(y, _parents=(a,), _vjp=lambda g: (g * y,))


def clamp(a, lo, hi) -> Tensor:
    a = _coerce(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), _parents=(a,),
                  _vjp=lambda g: (g * mask,))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0 or g.shape != a.shape
                    else g,)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)
    return Tensor(out, _parents=(a,), _vjp=vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis=-1) -> Tensor:
    """Numerically stable softmax along one axis."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)
    return Tensor(y, _parents=(a,), _vjp=vjp)


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a 2-D matrix; each output row sums to 1."""
    m = _coerce(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D input, got shape {m.shape}")
    return softmax(m, axis=-1)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data
    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta
    return Tensor(y, _parents=(x, gamma, beta), _vjp=vjp)


def smooth_l1(a) -> Tensor:
    """Elementwise smooth L1: 0.5 t^2 for |t| < 1, |t| - 0.5 otherwise."""
    a = _coerce(a)
    t = a.data
    inner = np.abs(t) < 1.0
    y = np.where(inner, 0.5 * t * t, np.abs(t) - 0.5)
    return Tensor(y, _parents=(a,),
                  _vjp=lambda g: (g * np.where(inner, t, np.sign(t)),))


def from_op(data: np.ndarray, parents, vjp) -> Tensor:
    """Build a tensor for a custom operation with an explicit vjp closure."""
    return Tensor(data, _parents=tuple(parents), _vjp=vjp)


def linear(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


_ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "identity": lambda t: t,
}


def mlp_forward(x, layers, activation: str = "relu") -> Tensor:
    """Affine chain with an activation between layers and none after the last.

    ``layers`` is a sequence of (weight, bias) pairs; weight shapes must chain
    so layer k's input width equals layer k-1's output width.
    """
    if activation not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    act = _ACTIVATIONS[activation]
    x = _coerce(x)
    width = x.shape[-1]
    for i, (w, b) in enumerate(layers):
        if w.shape[0] != width:
            raise ConfigurationError(
                f"mlp layer {i} expects input width {w.shape[0]}, got {width}")
        x = linear(x, w, b)
        width = w.shape[-1]
        if i + 1 < len(layers):
            x = act(x)
    return x


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    per_input: list

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def grad_check(fn, inputs, tol: float = 1e-4, step: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued computation with central
    finite differences.

    ``fn(*inputs)`` must return a scalar Tensor. Relative error per entry is
    |analytic - numeric| / max(|analytic| + |numeric|, 1e-6); the report holds
    the max over all checked entries. ``max_entries`` caps how many entries of
    each input are probed (a deterministic subsample keyed on ``seed``).
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar computation, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    per_input = []
    worst = 0.0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            rng = np.random.default_rng([seed, i])
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            entries = np.arange(n)
        a_flat = analytic[i].reshape(-1)
        max_err = 0.0
        worst_entry = -1
        for j in entries:
            orig = flat[j]
            h = step * max(1.0, abs(orig))
            flat[j] = orig + h
            f_plus = float(fn(*inputs).data.reshape(()))
            flat[j] = orig - h
            f_minus = float(fn(*inputs).data.reshape(()))
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[j]) + abs(numeric), 1e-6)
            err = abs(a_flat[j] - numeric) / denom
            if err > max_err:
                max_err = err
                worst_entry = int(j)
        per_input.append((i, max_err, worst_entry))
        worst = max(worst, max_err)
    return GradCheckReport(max_rel_err=worst, tol=tol, passed=worst < tol,
                           per_input=per_input)
