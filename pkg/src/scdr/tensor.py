"""Dense tensors with reverse-mode automatic differentiation.

Every operation that produces a :class:`Tensor` from inputs that require a
gradient records its parents and a closure mapping the upstream gradient to
one gradient per parent.  :meth:`Tensor.backward` walks that record in
reverse topological order and then releases it, so a graph can be
differentiated exactly once.

Storage is float32 by default; float64 tensors are accepted and kept as
float64, which the gradient-check suite uses for tight tolerances.
Reductions and products accumulate in float64 regardless of storage.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphStateError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.array(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr.copy()
    return arr.astype(DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional float array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    # construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
        parents = tuple(parents)
        dtype = np.result_type(*[p.data.dtype for p in parents]) if parents else DEFAULT_DTYPE
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=dtype)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        out._consumed = False
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    # array-like surface ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # differentiation ------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires one.

        The graph is released afterwards; calling again on the same loss
        raises :class:`GraphStateError`.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphStateError("graph already consumed by an earlier backward()")
        if not self.requires_grad:
            self._consumed = True
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self._consumed = True

    # elementwise arithmetic ----------------------------------------------

    def _coerce(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> Tensor:
        other = self._coerce(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> Tensor:
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = self._coerce(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor._from_op(x * y, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = self._coerce(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor._from_op(x / y, (self, other), back, "div")

    def __rtruediv__(self, other) -> Tensor:
        return self._coerce(other) / self

    def __matmul__(self, other) -> Tensor:
        other = self._coerce(other)
        x, y = self.data, other.data
        if x.ndim < 2 or y.ndim < 2:
            raise DimensionError(f"matmul needs ≥2-d operands, got {x.shape} and {y.shape}")
        if x.shape[-1] != y.shape[-2]:
            raise DimensionError(f"matmul inner axis mismatch: {x.shape} @ {y.shape}")
        x64, y64 = x.astype(np.float64), y.astype(np.float64)

        def back(g):
            g64 = g.astype(np.float64)
            gx = g64 @ np.swapaxes(y64, -1, -2)
            gy = np.swapaxes(x64, -1, -2) @ g64
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._from_op(x64 @ y64, (self, other), back, "matmul")

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> Tensor:
        x = self.data
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def relu(self) -> Tensor:
        x = self.data
        pos = x > 0
        return Tensor._from_op(np.where(pos, x, 0), (self,), lambda g: (g * pos,), "relu")

    # reductions and shape ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        out = np.sum(self.data, axis=axis, keepdims=keepdims, dtype=np.float64)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(out, (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise DimensionError("mean over an empty extent")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def flatten(self) -> Tensor:
        return self.reshape(-1)

    def transpose(self, *axes) -> Tensor:
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "transpose"
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __getitem__(self, key) -> Tensor:
        shape = self.shape
        dtype = self.data.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, key, g)
            return (full,)

        return Tensor._from_op(self.data[key], (self,), back, "index")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis."""
    if not tensors:
        raise DimensionError("stack of an empty list")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs identical shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, back, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, back, "concat")
