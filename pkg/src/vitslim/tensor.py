"""Minimal dense float32 tensor with reverse-mode automatic differentiation.

The graph is recorded eagerly: every differentiable operation attaches a
backward closure and its parent tensors to the output. ``backward`` walks the
reachable subgraph once, in reverse topological order, accumulating gradients
additively. Creation order doubles as a topological order because outputs are
always created after their inputs.

Broadcasting follows the trailing-dimension rule (numpy semantics); that is
the only pattern the network equations need.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import GradientError, NumericsError, ShapeError

Scalar = Union[int, float]

_grad_enabled = True
_finite_checks = False
_dtype = np.float32
_node_counter = itertools.count()


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_default_dtype(dt) -> None:
    """Switch the element type (float32 by default; float64 for high-precision
    gradient checking in tests)."""
    global _dtype
    dt = np.dtype(dt)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    _dtype = dt.type


def default_dtype():
    return _dtype


def set_finite_checks(enabled: bool) -> None:
    """When enabled, every op output is checked for NaN/Inf (slow; for tests)."""
    global _finite_checks
    _finite_checks = enabled


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=_dtype)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_nid", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None
        self._nid = next(_node_counter)
        self._done = False

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_dtype), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_dtype), requires_grad)

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Record a primitive op: ``backward(gout)`` must accumulate into parents."""
        out = Tensor(data)
        if _finite_checks and not np.all(np.isfinite(data)):
            raise NumericsError("non-finite values produced by a forward op")
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ---- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- gradient accumulation ------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # ---- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: Scalar):
        return pow_(self, p)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    # ---- backward pass --------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with ``requires_grad``.

        The loss must be scalar. A second backward through the same graph
        raises; re-run the forward pass instead.
        """
        if self.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not require grad; nothing to differentiate")
        if self._done:
            raise GradientError("backward called twice on the same graph; re-run forward first")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack[-1]
            if id(node) in seen:
                stack.pop()
                continue
            pending = [p for p in node._parents if id(p) not in seen and p._backward is not None]
            if pending:
                stack.extend(pending)
            else:
                seen.add(id(node))
                order.append(node)
                stack.pop()

        self._accum(np.ones_like(self.data))
        for node in sorted(order, key=lambda t: t._nid, reverse=True):
            if node._backward is not None and node.grad is not None:
                if node._done:
                    raise GradientError("backward called twice on the same graph; re-run forward first")
                node._backward(node.grad)
                node._done = True
        self._done = True


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    for da, db in zip(reversed(a_shape), reversed(b_shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a_shape} and {b_shape} are not broadcastable")


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape`` by summing expanded axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- primitive operations -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g, b.shape))

    return Tensor.from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(-g, b.shape))

    return Tensor.from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape)
    if np.any(b.data == 0):
        raise NumericsError("division by zero")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor.from_op(out, (a, b), backward)


def elementwise(op_kind: str, a, b) -> Tensor:
    """Dispatch pointwise arithmetic by name; kinds: add, sub, mul, div."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op_kind not in ops:
        raise ValueError(f"unknown elementwise op {op_kind!r}; expected one of {sorted(ops)}")
    return ops[op_kind](a, b)


def pow_(a: Tensor, p: Scalar) -> Tensor:
    a = _wrap(a)
    out = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1))

    return Tensor.from_op(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * out)

    return Tensor.from_op(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return Tensor.from_op(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * 0.5 / out)

    return Tensor.from_op(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out * out))

    return Tensor.from_op(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(unbroadcast(gb, b.shape))

    return Tensor.from_op(out, (a, b), backward)


def reshape(a: Tensor, new_shape) -> Tensor:
    a = _wrap(a)
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) into {new_shape}")
    out = a.data.reshape(new_shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.shape))

    return Tensor.from_op(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank-{a.ndim} tensor")
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inv))

    return Tensor.from_op(out, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).astype(a.data.dtype))
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        a._accum(np.broadcast_to(gg, a.shape).astype(a.data.dtype))

    return Tensor.from_op(np.asarray(out, dtype=a.data.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor.from_op(out, tuple(tensors), backward)
