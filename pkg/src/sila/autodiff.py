"""Define-by-run reverse-mode autodiff over dense float64 arrays.

Operations are recorded on the innermost active :class:`Tape` of the current
thread.  Outside a tape the primitives still compute values but record
nothing, which is what evaluation code wants.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = sum_(mul(w, w))
    ...     backward(loss)
    >>> w.grad
    array([6.])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "as_tensor",
    "backward",
    "zero_grads",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "add_bias",
    "reshape",
    "concat",
    "logsumexp",
    "softmax",
    "mean",
    "sum_",
    "pick",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(ValueError):
    """NaN or Inf reached a tensor or a gradient."""


_ids = itertools.count()
_local = threading.local()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense float64 array plus an accumulated gradient.

    ``requires_grad=True`` marks a leaf (a parameter) whose ``grad`` is
    filled by :func:`backward`.  Tensors produced by recorded operations are
    interior nodes; their gradients live only inside a backward pass.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, order="C")
        _check_finite(arr, "tensor values")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id = next(_ids)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; use as a context manager.

    Tapes are thread-confined: the active-tape stack is thread-local.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, values: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    for t in inputs:
        _check_finite(t.values, f"input to {op}")
    out = Tensor.__new__(Tensor)
    arr = np.asarray(values, dtype=np.float64)
    out.values = arr if arr.flags.c_contiguous else arr.copy()
    _check_finite(out.values, f"output of {op}")
    out.requires_grad = False
    out.grad = None
    out.node_id = next(_ids)
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.records.append(_Record(op, inputs, out.node_id, bwd))
        out._tape = tape
    return out


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# -- primitives --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0.0
    return _emit("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def add_bias(x, b) -> Tensor:
    """Row-broadcast add: ``x`` is B x N, ``b`` has length N."""
    x, b = as_tensor(x), as_tensor(b)
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise _shape_error("add_bias", x.shape, b.shape)
    return _emit("add_bias", x.values + b.values, (x, b), lambda g: (g, g.sum(axis=0)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.values.size:
        raise _shape_error("reshape", a.shape, shape)
    old = a.shape
    return _emit("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors along the class axis (default) or batch axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    first = ts[0]
    for t in ts:
        if t.values.ndim != first.values.ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(first.shape, t.shape)) if i != axis
        ):
            raise _shape_error("concat", first.shape, t.shape)
    edges = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, edges, axis=axis))

    return _emit("concat", np.concatenate([t.values for t in ts], axis=axis), ts, bwd)


def logsumexp(z) -> Tensor:
    """Max-shifted log-sum-exp of each row of a B x M tensor; returns length B."""
    z = as_tensor(z)
    if z.values.ndim != 2:
        raise ShapeError(f"logsumexp: expected a 2-D tensor, got shape {z.shape}")
    zv = z.values
    return _emit(
        "logsumexp",
        kernels.row_logsumexp(zv),
        (z,),
        lambda g: (g[:, None] * kernels.row_softmax(zv),),
    )


def softmax(z) -> Tensor:
    z = as_tensor(z)
    if z.values.ndim != 2:
        raise ShapeError(f"softmax: expected a 2-D tensor, got shape {z.shape}")
    s = kernels.row_softmax(z.values)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("softmax", s, (z,), bwd)


def mean(a, axis: int = 0) -> Tensor:
    """Mean over the batch axis."""
    a = as_tensor(a)
    if a.values.ndim == 0:
        raise ShapeError("mean: cannot reduce a scalar")
    n = a.shape[axis]
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit("mean", a.values.mean(axis=axis), (a,), bwd)


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", np.asarray(a.values.sum(axis=axis)), (a,), bwd)


def pick(z, index) -> Tensor:
    """``out[i] = z[i, index[i]]`` for a B x M tensor."""
    z = as_tensor(z)
    idx = np.asarray(index, dtype=np.int64)
    if z.values.ndim != 2 or idx.shape != (z.shape[0],):
        raise _shape_error("pick", z.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= z.shape[1]):
        raise IndexError(f"pick: index out of range for {z.shape[1]} columns")
    rows = np.arange(z.shape[0])
    shape = z.shape

    def bwd(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _emit("pick", z.values[rows, idx], (z,), bwd)


# -- gradient replay ---------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every leaf reaching ``root``."""
    if root.values.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.is_leaf:
        if root.requires_grad:
            root.grad += 1.0
        return
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
    for rec in reversed(root._tape.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        for inp, ig in zip(rec.inputs, rec.backward(g)):
            if ig is None or not inp.tracked:
                continue
            _check_finite(ig, f"gradient flowing out of {rec.op}")
            if inp.is_leaf:
                inp.grad += ig
            elif inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + ig
            else:
                grads[inp.node_id] = ig


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
