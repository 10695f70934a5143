"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor`. When recording is
enabled and at least one input requires a gradient, the output carries a
:class:`Node` holding the operation tag, its inputs and a closure mapping the
output gradient to input gradients. Node ids come from a global counter, so the
nodes reachable from a loss form an append-only, topologically ordered list;
:func:`backward` replays it in strict reverse insertion order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
# extended precision is only used by finite-difference probes
EXTENDED = np.longdouble

_node_ids = itertools.count()
_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad():
    """Run the enclosed block without recording graph nodes."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class ShapeError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _real_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all dispatch to the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _real_array(x) -> np.ndarray:
    a = np.asarray(x)
    return a if a.dtype == EXTENDED else a.astype(DTYPE, copy=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor(out)
    if is_recording() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(next(_node_ids), kind, tuple(inputs), backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("subtract", a, b)
    return _make(
        "subtract",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("elementwise-multiply", a, b)
    return _make(
        "elementwise-multiply",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scalar-scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant ``value``."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)
    return _make("masked-fill", out, (a,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# linear algebra and reshaping
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), back)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got shape {a.shape}")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concatenate: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concatenate", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(a, index) -> Tensor:
    """Select entries along axis 0; repeated indices accumulate gradient."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise IndexError(f"gather-rows: index out of range for {a.shape[0]} rows")

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make("gather-rows", a.data[index], (a,), back)


def embedding_lookup(table, ids) -> Tensor:
    """Look up rows of an embedding ``table`` for an integer id array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding-lookup: id out of range for vocab {table.shape[0]}")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding-lookup", table.data[ids], (table,), back)


def take_last(a, index) -> Tensor:
    """``out[..., 0] = a[..., index[...]]`` along the last axis (no keepdims)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, index[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make("take-last", out, (a,), back)


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean-over-axis", out, (a,), back)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("row-softmax", s, (a,), back)


def logsumexp(a) -> Tensor:
    """log(sum(exp)) over the last axis; ``-inf`` entries are ignored."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("logsumexp: a row has no finite entries")
    e = np.exp(a.data - m)
    tot = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(tot))[..., 0]
    return _make("logsumexp", out, (a,), lambda g: (g[..., None] * e / tot,))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make("log-softmax", out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def l2_normalize(a, eps: float = 0.0) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    a = as_tensor(a)
    norm = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError("l2-normalize-rows: zero-norm row")
    y = a.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2-normalize-rows", y, (a,), back)


OPS = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "elementwise-multiply": multiply,
    "scalar-scale": scale,
    "exp": exp,
    "log": log,
    "row-softmax": softmax,
    "l2-normalize-rows": l2_normalize,
    "mean-over-axis": mean,
    "concatenate": concatenate,
    "gather-rows": gather_rows,
    "transpose": transpose,
    "relu": relu,
    "embedding-lookup": embedding_lookup,
    "masked-fill": masked_fill,
}


def op_forward(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch an operation by its tag."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}") from None
    if kind == "concatenate":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _reachable(loss: Tensor) -> list[Tensor]:
    seen, out, stack = set(), [], [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t.node.inputs)
    out.sort(key=lambda t: t.node.id, reverse=True)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored; call ``zero_grad`` on the
    parameters first for a fresh step.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in _reachable(loss):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                k = id(inp)
                grads[k] = gi if k not in grads else grads[k] + gi
