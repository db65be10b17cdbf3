"""
Reverse-mode differentiation over numpy arrays.

A `Tensor` records the op that produced it together with a backward closure
mapping the output gradient to one gradient per parent. `Tensor.backward()`
walks the recorded graph in reverse topological order and accumulates
gradients in float64 regardless of the storage dtype.

Only the operations the field, renderer and losses use are provided.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


ArrayLike = Union["Tensor", np.ndarray, float, int]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True


class NonFiniteGradientError(FloatingPointError):
    """A NaN or Inf appeared while propagating gradients through `op`."""

    def __init__(self, op: str):
        super().__init__(f"Non-finite gradient produced by op '{op}'")
        self.op = op


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (inference, mesh extraction, metrics)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value: ArrayLike, dtype=None) -> "Tensor":
    """Wrap constants; Python scalars take `dtype` so float32 graphs stay float32."""
    if isinstance(value, Tensor):
        return value
    if dtype is not None and not isinstance(value, np.ndarray):
        return Tensor(np.asarray(value, dtype=dtype))
    return Tensor(value)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data) if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Backward, op: str) -> "Tensor":
        """Wrap the result of a custom forward computation as a graph node."""
        out = cls(data, op=op)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ---- array protocol ----

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ---- arithmetic ----

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
            "sub",
        )

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.from_op(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __pow__(self, exponent: float) -> "Tensor":
        x = self.data
        return Tensor.from_op(x ** exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        return Tensor.from_op(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g), "matmul")

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(self.data[index], (self,), backward, "getitem")

    # ---- reductions and shape ----

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        # float64 accumulation for reproducible reductions
        out = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(self.dtype, copy=False)
        return Tensor.from_op(out, (self,), backward, "sum")

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape) -> "Tensor":
        original = self.shape
        return Tensor.from_op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def cumsum(self, axis: int) -> "Tensor":
        def backward(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return Tensor.from_op(np.cumsum(self.data, axis=axis), (self,), backward, "cumsum")

    # ---- elementwise ----

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor.from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor.from_op(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self) -> "Tensor":
        x = self.data
        return Tensor.from_op(np.maximum(x, 0), (self,), lambda g: (g * (x > 0),), "relu")

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.logaddexp(0, x).astype(x.dtype, copy=False)
        return Tensor.from_op(out, (self,), lambda g: (g * _sigmoid(x),), "softplus")

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def clip(self, low: Optional[float], high: Optional[float]) -> "Tensor":
        x = self.data
        lo = -np.inf if low is None else low
        hi = np.inf if high is None else high
        inside = (x >= lo) & (x <= hi)
        return Tensor.from_op(np.clip(x, lo, hi), (self,), lambda g: (g * inside,), "clip")

    # ---- backward ----

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=np.float64)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=np.float64)
                if not np.all(np.isfinite(parent_grad)):
                    raise NonFiniteGradientError(node.op)
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---- free functions ----

def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    expanded = [p.reshape(*_insert_axis(p.shape, axis)) for p in parts]
    return concat(expanded, axis=axis)


def _insert_axis(shape: Tuple[int, ...], axis: int) -> Tuple[int, ...]:
    position = axis if axis >= 0 else len(shape) + 1 + axis
    return shape[:position] + (1,) + shape[position:]


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)
    return Tensor.from_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)),
        "where",
    )


def parameter(data: np.ndarray) -> Tensor:
    """Trainable leaf."""
    return Tensor(np.asarray(data), requires_grad=True, op="parameter")


def segment_sum(values: ArrayLike, segment_ids: np.ndarray, segments: int) -> Tensor:
    """Sum rows of `values` into `segments` buckets (values [K, ...] -> [segments, ...])."""
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, ids, values.data)
    return Tensor.from_op(out.astype(values.dtype, copy=False), (values,), lambda g: (g[ids],), "segment_sum")


def cast(value: ArrayLike, dtype) -> Tensor:
    """Change storage dtype; gradients pass through unchanged."""
    value = as_tensor(value)
    return Tensor.from_op(value.data.astype(dtype), (value,), lambda g: (g,), "cast")
