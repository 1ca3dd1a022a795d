"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape` when
at least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is how inference runs.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with GradTape() as tape:
...     y = (x * x).sum()
>>> tape.backward(y)
>>> x.grad
array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from gsrformer import kernels

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class TapeError(RuntimeError):
    pass


class EvaluationError(ArithmeticError):
    """A function under gradient check produced a non-finite value."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class GradTape:
    """Ordered record of differentiable ops.

    ``backward`` walks the record in reverse once; a second call without
    :meth:`reset` raises :class:`TapeError` because saved intermediates may
    have been consumed.
    """

    _local = threading.local()

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._replayed = False

    @classmethod
    def current(cls) -> "GradTape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self):
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        self._local.stack.append(self)
        return self

    def __exit__(self, *exc):
        self._local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        self._nodes.append((out, parents, backward))

    def reset(self) -> None:
        self._nodes.clear()
        self._replayed = False

    def backward(self, loss: Tensor, grad=None) -> None:
        if self._replayed:
            raise TapeError("tape already replayed; call reset() before recording again")
        self._replayed = True
        if grad is None:
            if loss.data.size != 1:
                raise TapeError("backward from a non-scalar needs an explicit seed gradient")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        if loss._leaf and loss.requires_grad:
            _accumulate_leaf(loss, grads.pop(id(loss)))
            return
        for out, parents, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if p._leaf:
                    _accumulate_leaf(p, pg)
                else:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, backward: Callable) -> Tensor:
    data = np.asarray(data)
    if data.dtype == np.float64 and any(p.data.dtype == np.float32 and p.data.ndim for p in parents):
        # 0-d float64 constants must not promote a 32-bit graph
        data = data.astype(np.float32)
    out = Tensor(data)
    tape = GradTape.current()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * on,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + e^x) without overflow."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * sig,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one gemm over the flattened batch
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g @ b.data.T, a2.T @ g2)

        return _make(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


# reductions ------------------------------------------------------------------

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def max_(x, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward)


def sorted_sum(x, axis: int) -> Tensor:
    """Sum along ``axis`` in ascending-value order.

    The result is bitwise independent of the order of entries along the axis,
    which keeps permutation-invariant aggregation exact in floating point.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    lead = moved.shape[:-1]
    out = kernels.sorted_sum_rows(moved.reshape(math.prod(lead), moved.shape[-1])).reshape(lead)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _make(out, (x,), backward)


# shape -----------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(out, (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    return _make(out, tuple(ts),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` along the first axis."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _make(out, (table,), backward)


# fused numerics ----------------------------------------------------------------

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax. ``mask`` (broadcastable, True = keep) zeroes entries."""
    x = as_tensor(x)
    data = x.data
    if mask is not None:
        data = np.where(mask, data, -np.inf)
    axis = axis % x.ndim
    moved = np.moveaxis(data, axis, -1)
    shape = moved.shape
    y = kernels.softmax_rows(moved.reshape(-1, shape[-1])).reshape(shape)

    def backward(g):
        gm = np.moveaxis(g, axis, -1).reshape(-1, shape[-1])
        gx = kernels.softmax_rows_backward(y.reshape(-1, shape[-1]), gm).reshape(shape)
        return (np.moveaxis(gx, -1, axis),)

    return _make(np.moveaxis(y, -1, axis), (x,), backward)


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis."""
    x = as_tensor(x)
    shape = x.shape
    y = kernels.log_softmax_rows(x.data.reshape(-1, shape[-1])).reshape(shape)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit (biased) variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    y, xhat, rstd = kernels.layer_norm_rows(x.data.reshape(-1, c), gamma.data, beta.data, eps)

    def backward(g):
        gx, gg, gb = kernels.layer_norm_rows_backward(g.reshape(-1, c), xhat, rstd, gamma.data)
        return (gx.reshape(x.shape), gg, gb)

    return _make(y.reshape(x.shape), (x, gamma, beta), backward)


# gradient check ----------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6, coords=None, atol: float = 0.0) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is ``|a - n| / (|a| + |n| + 1e-12)``. ``coords``
    restricts the check to a subset of flat indices; ``atol`` (default 0)
    treats absolute differences below it as exact.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    if not np.all(np.isfinite(y.data)):
        raise EvaluationError("f(x) is not finite")
    if y.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    tape.backward(y)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    flat_idx = np.arange(x0.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in flat_idx:
        xp = x0.copy().reshape(-1)
        xp[i] += h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        xp[i] -= 2 * h
        fm = float(f(Tensor(xp.reshape(x0.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"f is not finite near coordinate {i}")
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        diff = abs(a - num)
        if diff <= atol:
            continue
        worst = max(worst, diff / (abs(a) + abs(num) + 1e-12))
    return worst
