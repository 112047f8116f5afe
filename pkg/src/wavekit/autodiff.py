"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape-based engine: each operation records a node holding the parent
tensors and a backward closure over the forward values it needs. Everything
is float64 and row-major; there are no views with strides and no device
placement. The engine is single-threaded: tensor values are immutable after
creation except the ``grad`` buffer, which is owned by a single backward
pass.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeNode:
    """One recorded operation: op kind, parent tensors, backward rule.

    ``backward`` maps the output gradient to one gradient array per parent
    (``None`` for parents that do not need one).
    """

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple["Tensor", ...],
                 backward: Callable[[Array], Sequence[Array | None]]):
        self.op = op
        self.parents = parents
        self.backward = backward


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation paths)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: TapeNode | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output.

        Visits the tape in a deterministic topological order and accumulates
        gradients into every reachable tensor with ``requires_grad``.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                topo.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t.node is None or t.grad is None:
                continue
            grads = t.node.backward(t.grad)
            for parent, g in zip(t.node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _promote(other))

    def __radd__(self, other):
        return add(_promote(other), self)

    def __sub__(self, other):
        return sub(self, _promote(other))

    def __rsub__(self, other):
        return sub(_promote(other), self)

    def __mul__(self, other):
        return mul(self, _promote(other))

    def __rmul__(self, other):
        return mul(_promote(other), self)

    def __truediv__(self, other):
        return div(self, _promote(other))

    def __rtruediv__(self, other):
        return div(_promote(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _promote(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def matmul(self, other):
        return matmul(self, _promote(other))


def _promote(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: Array, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, node=TapeNode(op, parents, backward))
    return Tensor(data)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and shape ops ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, "sub", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, "div", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,),
                 lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(orig),))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), "getitem", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_promote(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, "concat", tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def pad_stack(tensors: Sequence[Tensor], length: int | None = None) -> Tensor:
    """Stack variable-length ``(s_i, d)`` tensors into ``(B, L, d)`` zero-padded."""
    tensors = list(tensors)
    lengths = [t.shape[0] for t in tensors]
    width = tensors[0].shape[1]
    if length is None:
        length = max(lengths)
    out = np.zeros((len(tensors), length, width), dtype=np.float64)
    for i, t in enumerate(tensors):
        out[i, :lengths[i]] = t.data

    def backward(g):
        return tuple(g[i, :lengths[i]] for i in range(len(tensors)))

    return _make(out, "pad_stack", tuple(tensors), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0
                    else np.full(a.data.shape, g.reshape(())),)
        g_exp = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g_exp = np.expand_dims(g_exp, ax)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), "sum", (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def backward(g):
        density = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * density),)

    return _make(out, "gelu", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, "softmax", (a,), backward)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        proj = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - out * proj),)

    return _make(out, "layernorm", (a,), backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target], via stable log-sum-exp."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (N, C) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    n, c = logits.shape
    if t.shape[0] != n:
        raise ValueError(f"expected {n} target indices, got {t.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"target index out of range for {c} classes: {t}")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    losses = lse - z[rows, t]
    out = np.asarray(losses.mean(), dtype=np.float64)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (g * p / n,)

    return _make(out, "softmax_cross_entropy", (logits,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (full,)

    return _make(out, "embedding", (table,), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select one row per batch item: (B, S, d) + (B,) -> (B, d)."""
    idx = np.asarray(idx, dtype=np.intp)
    batch = np.arange(a.shape[0])
    out = a.data[batch, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[batch, idx] = g
        return (full,)

    return _make(out, "gather_rows", (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn once at forward time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * mask, "dropout", (a,), lambda g: (g * mask,))


def rope_rotate(a: Tensor, cos: Array, sin: Array) -> Tensor:
    """Rotate interleaved (even, odd) pairs of the last axis by given angles.

    ``cos``/``sin`` must broadcast against ``a[..., 0::2]``.
    """
    if a.shape[-1] % 2 != 0:
        raise DimensionError(f"rope_rotate needs an even last axis, got {a.shape}")
    xe = a.data[..., 0::2]
    xo = a.data[..., 1::2]
    out = np.empty_like(a.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        full = np.empty_like(a.data)
        full[..., 0::2] = ge * cos + go * sin
        full[..., 1::2] = -ge * sin + go * cos
        return (full,)

    return _make(out, "rope_rotate", (a,), backward)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    eps: float
    tol: float

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f, x: Tensor, eps: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central finite differences, coordinate-wise.

    Checks every coordinate unless ``max_coords`` caps the count, in which
    case a deterministic random subset is probed. The relative error uses a
    unit floor: |a - n| / max(1, |a|, |n|).
    """
    base = Tensor(x.data.copy(), requires_grad=True)
    y = f(base)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    y.backward()
    analytic = base.grad if base.grad is not None else np.zeros_like(base.data)
    analytic = analytic.reshape(-1)

    flat = x.data.reshape(-1).copy()
    n = flat.size
    coords = np.arange(n)
    if max_coords is not None and max_coords < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)

    max_rel = 0.0
    for i in coords:
        bumped = flat.copy()
        bumped[i] += eps
        hi = f(Tensor(bumped.reshape(x.data.shape))).item()
        bumped[i] -= 2 * eps
        lo = f(Tensor(bumped.reshape(x.data.shape))).item()
        numeric = (hi - lo) / (2 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        max_rel = max(max_rel, rel)

    return GradCheckReport(passed=bool(max_rel <= tol), max_rel_error=float(max_rel),
                           checked=len(coords), eps=eps, tol=tol)
