"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array plus an optional gradient buffer.
Every op records a backward closure on a tape (the implicit DAG of parent
links); `backward()` replays the tape in reverse topological order, visiting
each node exactly once. Gradients accumulate with `+=`, so callers must zero
grads between backward passes unless accumulation is wanted.

Double precision is the default dtype: the test suite leans on central
finite differences, which need f64 headroom. Broadcasting is supported for
elementwise ops and matmul leading-batch dims only.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

# Forward outputs are scanned for NaN/Inf when this is on (an error state per
# the tensor contract). Disable only in profiled hot paths.
CHECK_FINITE = True

Array = np.ndarray


def _asarray(value, dtype=np.float64) -> Array:
    arr = np.asarray(value, dtype=dtype)
    return arr


def _check_finite(arr: Array, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, reversing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, *, dtype=np.float64):
        self.data = _asarray(data, dtype=dtype)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self._op = "leaf"

    # -- construction -------------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def _from_op(data: Array, parents: Sequence["Tensor"], op: str,
                 backward: Callable[[Array], None]) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        return out

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(grad, self.data.shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- elementwise ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor._from_op(self.data + other.data, (self, other), "add", None)

        def backward(g: Array) -> None:
            self._accumulate(g)
            other._accumulate(g)

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._from_op(-self.data, (self,), "neg", None)
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        out = Tensor._from_op(self.data - other.data, (self, other), "sub", None)

        def backward(g: Array) -> None:
            self._accumulate(g)
            other._accumulate(-g)

        out._backward = backward
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor._from_op(self.data * other.data, (self, other), "mul", None)

        def backward(g: Array) -> None:
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = Tensor._from_op(self.data / other.data, (self, other), "div", None)

        def backward(g: Array) -> None:
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data * other.data))

        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def pow(self, exponent: float) -> "Tensor":
        out = Tensor._from_op(self.data ** exponent, (self,), "pow", None)
        out._backward = lambda g: self._accumulate(g * exponent * self.data ** (exponent - 1.0))
        return out

    __pow__ = pow

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            data = np.exp(self.data)
        out = Tensor._from_op(data, (self,), "exp", None)
        out._backward = lambda g: self._accumulate(g * data)
        return out

    def log(self) -> "Tensor":
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(self.data)
        out = Tensor._from_op(data, (self,), "log", None)
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)
        out = Tensor._from_op(data, (self,), "sqrt", None)
        out._backward = lambda g: self._accumulate(g * 0.5 / data)
        return out

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)
        out = Tensor._from_op(data, (self,), "tanh", None)
        out._backward = lambda g: self._accumulate(g * (1.0 - data * data))
        return out

    def sigmoid(self) -> "Tensor":
        # Stable split form: exp() of a non-positive argument on both branches.
        x = self.data
        data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor._from_op(data, (self,), "sigmoid", None)
        out._backward = lambda g: self._accumulate(g * data * (1.0 - data))
        return out

    def clamp_min(self, floor: float) -> "Tensor":
        data = np.maximum(self.data, floor)
        out = Tensor._from_op(data, (self,), "clamp_min", None)
        mask = self.data > floor
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor._from_op(self.data.reshape(shape), (self,), "reshape", None)
        out._backward = lambda g: self._accumulate(g.reshape(old))
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out = Tensor._from_op(np.swapaxes(self.data, a, b), (self,), "swapaxes", None)
        out._backward = lambda g: self._accumulate(np.swapaxes(g, a, b))
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = Tensor._from_op(self.data.transpose(axes), (self,), "transpose", None)
        out._backward = lambda g: self._accumulate(g.transpose(inverse))
        return out

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        """Contiguous slice `[start, start+length)` along `axis`."""
        if start < 0 or start + length > self.data.shape[axis]:
            raise ShapeError(
                f"narrow [{start}:{start + length}) out of range for axis {axis} "
                f"with extent {self.data.shape[axis]}")
        index = [slice(None)] * self.data.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        out = Tensor._from_op(self.data[index].copy(), (self,), "narrow", None)

        def backward(g: Array) -> None:
            full = np.zeros_like(self.data)
            full[index] = g
            self._accumulate(full)

        out._backward = backward
        return out

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        out = Tensor._from_op(np.asarray(out_data), (self,), "sum", None)
        shape = self.data.shape

        def backward(g: Array) -> None:
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape).copy())

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- linear algebra ----------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul requires tensors of rank >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        out = Tensor._from_op(a @ b, (self, other), "matmul", None)

        def backward(g: Array) -> None:
            self._accumulate(g @ np.swapaxes(b, -1, -2))
            other._accumulate(np.swapaxes(a, -1, -2) @ g)

        out._backward = backward
        return out

    __matmul__ = matmul

    def softmax(self) -> "Tensor":
        """Numerically stabilized softmax over the last axis."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        exps = np.exp(shifted)
        data = exps / exps.sum(axis=-1, keepdims=True)
        out = Tensor._from_op(data, (self,), "softmax", None)

        def backward(g: Array) -> None:
            inner = (g * data).sum(axis=-1, keepdims=True)
            self._accumulate((g - inner) * data)

        out._backward = backward
        return out

    # -- backward pass -------------------------------------------------------------

    def backward(self) -> None:
        """Populate `grad` on every reachable requires_grad tensor.

        The loss must be a scalar (single element). Visits each tape node
        exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the tape; result is topologically sorted."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# -- free functions ---------------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.matmul(b)


def softmax(x: Tensor) -> Tensor:
    return x.softmax()


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + inner.tanh())


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._from_op(data, tensors, "concat", None)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g: Array) -> None:
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            t._accumulate(g[tuple(index)])
            offset += size

    out._backward = backward
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: out[t] = table[ids[t]]. Backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"token id out of range for vocab {vocab}")
    out = Tensor._from_op(table.data[ids], (table,), "embedding", None)

    def backward(g: Array) -> None:
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    out._backward = backward
    return out


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; raises on zero-norm inputs."""
    na = float(np.min(np.linalg.norm(a.data, axis=-1)))
    nb = float(np.min(np.linalg.norm(b.data, axis=-1)))
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity undefined for zero-norm vector")
    dot = (a * b).sum(axis=-1)
    return dot / ((a * a).sum(axis=-1).sqrt() * (b * b).sum(axis=-1).sqrt())


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
