"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation whose inputs participate in gradient tracking appends a node
to the calling thread's tape. ``backward``/``grad`` walk that tape in reverse
creation order (which is a valid topological order) and free it afterwards.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "elementwise",
    "matmul",
    "softmax",
    "reduce",
    "concat",
    "backward",
    "grad",
    "no_grad",
    "checked",
    "is_checked",
]


class AutodiffError(Exception):
    """Base class for tensor/autodiff failures."""


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphError(AutodiffError, RuntimeError):
    pass


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "freed")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.freed = False


class Tape:
    """Ordered record of differentiable operations for one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, node: _Node):
        self.nodes.append(node)

    def free(self):
        for node in self.nodes:
            node.freed = True
            node.out = None
            node.backward_fn = None
        self.nodes = []


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.checked = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def checked(enabled: bool = True):
    """Toggle NaN/Inf and log/sqrt domain checks for the current thread."""
    prev = _state.checked
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


def is_checked() -> bool:
    return _state.checked


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _lift(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


def _make(data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
    if _state.checked and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, tuple(parents), backward_fn)
        out._node = node
        _state.tape.record(node)
    return out


class Tensor:
    """An N-d float64 array that can take part in gradient recording.

    Tensors are treated as immutable; ops always allocate new data.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if _state.checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=5)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        _broadcast_shape(self.data, other.data)
        a_shape, b_shape = self.shape, other.shape
        return _make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        _broadcast_shape(self.data, other.data)
        a_shape, b_shape = self.shape, other.shape
        return _make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        _broadcast_shape(self.data, other.data)
        a, b = self.data, other.data
        return _make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        _broadcast_shape(self.data, other.data)
        a, b = self.data, other.data
        if _state.checked and np.any(b == 0):
            raise DomainError("division by zero")
        return _make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        p = float(p)
        return _make(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other), self)

    # -- unary ---------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        if _state.checked and np.any(a <= 0):
            raise DomainError("log of non-positive value")
        return _make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        a = self.data
        if _state.checked and np.any(a <= 0):
            raise DomainError("sqrt of non-positive value")
        out = np.sqrt(a)
        return _make(out, (self,), lambda g: (g * 0.5 / out,))

    def square(self):
        a = self.data
        return _make(a * a, (self,), lambda g: (2.0 * g * a,))

    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return _make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self):
        a = self.data
        return _make(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),))

    def silu(self):
        a = self.data
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        return _make(a * s, (self,), lambda g: (g * (s + a * s * (1.0 - s)),))

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(np.asarray(out, dtype=np.float64), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ---------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        return _make(out, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, idx):
        shape = self.shape
        parts = idx if isinstance(idx, tuple) else (idx,)
        fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def bw(g):
            full = np.zeros(shape)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return _make(np.array(self.data[idx]), (self,), bw)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


_UNARY = {
    "exp": Tensor.exp,
    "log": Tensor.log,
    "sqrt": Tensor.sqrt,
    "neg": Tensor.__neg__,
    "square": Tensor.square,
}
_BINARY = {
    "add": Tensor.__add__,
    "sub": Tensor.__sub__,
    "mul": Tensor.__mul__,
    "div": Tensor.__truediv__,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply a named elementwise op: add, sub, mul, div, exp, log, sqrt, neg, square."""
    a = _lift(a)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, _lift(b))
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    try:
        out = A @ B
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return (_unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape))

    return _make(out, (a, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def reduce(op: str, x, axis=None) -> Tensor:
    x = _lift(x)
    if op == "sum":
        return x.sum(axis=axis)
    if op == "mean":
        return x.mean(axis=axis)
    raise ValueError(f"unknown reduction {op!r}")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, bw)


def grad(loss: Tensor, wrt: Iterable[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
    """Return d(loss)/d(w) for each tensor in ``wrt`` without touching ``.grad``.

    Tensors in ``wrt`` that do not influence ``loss`` get zero gradients.
    """
    wrt = list(wrt)
    grads = _run_backward(loss)
    out = [np.array(grads.get(id(w), np.zeros(w.shape))) for w in wrt]
    if not retain_graph:
        _state.tape.free()
    return out


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf recorded on the tape, then free the tape."""
    tape = _state.tape
    leaves = {}
    for node in tape.nodes:
        for p in node.parents:
            if p._node is None and p.requires_grad:
                leaves[id(p)] = p
    grads = _run_backward(loss)
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros(leaf.shape) if g is None else g
    if loss._node is None and loss.requires_grad:
        loss.grad = np.ones(loss.shape)
    tape.free()


def _run_backward(loss: Tensor) -> dict:
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not recorded on any tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    node = loss._node
    if node is None:
        return grads
    if node.freed:
        raise GraphError("graph already freed; backward called twice without re-running forward")
    tape = _state.tape
    try:
        start = len(tape.nodes) - 1 - tape.nodes[::-1].index(node)
    except ValueError as exc:
        raise GraphError("loss was recorded on a different tape") from exc
    for n in reversed(tape.nodes[: start + 1]):
        g = grads.get(id(n.out))
        if g is None:
            continue
        pgrads = n.backward_fn(g)
        for p, pg in zip(n.parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    grads.setdefault(id(loss), np.ones(loss.shape))
    return grads
