"""Dense tensors with tape-based reverse-mode differentiation.

Values are stored as row-major numpy arrays, float32 by default. Reductions
(sum, mean and friends) accumulate in float64 and cast back, so results are
reproducible across platforms. Every differentiable operation records a
``TapeEntry``; calling :func:`backward` on a scalar loss builds the tape for
the subgraph that produced it and replays the entries once, in reverse.

Tensors are treated as immutable once an operation has produced them. Code
that needs gradient-free execution (evaluation, quantized inference) wraps
itself in :func:`no_grad`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad():
    """Disable tape recording for the enclosed block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def use_dtype(dtype):
    """Run the enclosed block with a different default scalar type.

    The engine defaults to float32 storage. Verification code (e.g. finite
    difference gradient checks, where float32 rounding would swamp the
    h=1e-4 quotient) can switch to float64 for the duration of a check.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """N-dimensional array plus the bookkeeping needed for backprop.

    ``grad`` is populated (as a numpy array of the same shape) by
    :func:`backward` for every ``requires_grad`` leaf reachable from the
    loss. Intermediate results carry a reference to the tape entry that
    produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._entry: Optional[TapeEntry] = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self._entry is None

    def __repr__(self) -> str:
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad_tag})"

    # -- operators ---------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


class TapeEntry:
    """One recorded primitive application.

    ``backward`` maps the gradient at the output to a tuple of gradients,
    one per input (``None`` for inputs that do not need one).
    """

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple, output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class ComputeTape:
    """Topologically ordered list of the entries behind one output tensor.

    Built on demand by :func:`backward`; every entry's inputs were produced
    by earlier entries or are leaves, and the reverse replay visits each
    entry exactly once.
    """

    def __init__(self, root: Tensor):
        self.entries: list[TapeEntry] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            entry = tensor._entry
            if entry is None or id(tensor) in seen:
                continue
            if expanded:
                seen.add(id(tensor))
                self.entries.append(entry)
            else:
                stack.append((tensor, True))
                for parent in entry.inputs:
                    if parent._entry is not None and id(parent) not in seen:
                        stack.append((parent, False))

    def replay_backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for entry in reversed(self.entries):
            grad_out = grads.pop(id(entry.output), None)
            if grad_out is None:
                continue
            for parent, grad in zip(entry.inputs, entry.backward(grad_out)):
                if grad is None:
                    continue
                if parent._entry is None:
                    if parent.requires_grad:
                        if parent.grad is None:
                            parent.grad = np.zeros_like(parent.data)
                        parent.grad += grad.astype(parent.data.dtype, copy=False)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + grad
                    else:
                        grads[key] = grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar (a single element).
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = ComputeTape(loss)
    tape.replay_backward(loss, np.ones_like(loss.data))


# -- recording helpers ------------------------------------------------------


def as_tensor(value, ref: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = ref.data.dtype if ref is not None else default_dtype()
    return Tensor(np.asarray(value, dtype=dtype))


def _record(inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    needs = _grad_enabled() and any(
        t.requires_grad or t._entry is not None for t in inputs
    )
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        out._entry = TapeEntry(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, grad_fn)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, grad_fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _record((a, b), out, grad_fn)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    if not np.isfinite(out).all():
        raise FloatingPointError("division produced non-finite values")

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record((a, b), out, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape[1]} (lhs dim 1) vs "
            f"{b.shape[0]} (rhs dim 0)")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, grad_fn)


# -- elementwise nonlinearities ----------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _record((x,), out, grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    # split form keeps exp() off large positive arguments
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = out.astype(d.dtype, copy=False)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _record((x,), out, grad_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _record((x,), out, grad_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    if not np.isfinite(out).all():
        raise FloatingPointError("exp overflowed to non-finite values")

    def grad_fn(g):
        return (g * out,)

    return _record((x,), out, grad_fn)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise FloatingPointError("log requires strictly positive inputs")
    out = np.log(x.data)

    def grad_fn(g):
        return (g / x.data,)

    return _record((x,), out, grad_fn)


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise FloatingPointError("sqrt requires non-negative inputs")
    out = np.sqrt(x.data)

    def grad_fn(g):
        return (g * (0.5 / out),)

    return _record((x,), out, grad_fn)


# -- reductions ---------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=x.data.dtype)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)

    return _record((x,), out, grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a % x.ndim] for a in axes]))
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64) / count
    out = np.asarray(out, dtype=x.data.dtype)

    def grad_fn(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)

    return _record((x,), out, grad_fn)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _record((x,), out, grad_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _record((x,), out, grad_fn)


def take(x: Tensor, index) -> Tensor:
    """Basic indexing (ints/slices); gradient scatters back into place."""
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g.reshape(full[index].shape)
        return (full,)

    return _record((x,), np.ascontiguousarray(out), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(tensors, out, grad_fn)


def tile(x: Tensor, reps: Sequence[int]) -> Tensor:
    """Repeat ``x`` whole times along each axis (numpy tile semantics)."""
    reps = tuple(int(r) for r in reps)
    if len(reps) != x.ndim:
        raise ShapeError(f"tile expects one rep per axis, got {reps} for {x.shape}")
    out = np.tile(x.data, reps)

    def grad_fn(g):
        # fold each repeated axis: view as (rep, base) pairs and sum the reps
        folded = g.reshape(tuple(n for r, b in zip(reps, x.shape) for n in (r, b)))
        return (folded.sum(axis=tuple(range(0, 2 * x.ndim, 2))),)

    return _record((x,), out, grad_fn)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-D table (embedding lookup)."""
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record((table,), out, grad_fn)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"{what} contains non-finite values")
    return x
