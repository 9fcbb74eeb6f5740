"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs, a closure computing the local vector-Jacobian product, and a
closure that recomputes its forward value. Node ids come from a global
monotone counter, so sorting a graph by id is a valid topological order.

Broadcasting is deliberately narrow. A binary elementwise op accepts

* two tensors of equal shape,
* a scalar right operand (Python number or 0-d tensor),
* a right operand whose shape equals the trailing dimensions of the left
  one (bias-style broadcast over leading batch axes).

Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """backward() was called on something that is not a recorded scalar."""


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording nodes (values only)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op",
                 "_parents", "_vjp", "_forward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id = next(_node_ids) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._forward = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose2d(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            return reduce("sum", reshape(self, (-1,)), 0)
        return reduce("sum", self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            return reduce("mean", reshape(self, (-1,)), 0)
        return reduce("mean", self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf: named, gradient-accumulating, optionally decay-exempt."""

    __slots__ = ("name", "decay_exempt")

    def __init__(self, data, name: str = "", decay_exempt: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.decay_exempt = decay_exempt

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(out: np.ndarray, parents: Sequence[Tensor], vjp: Callable,
          op: str, forward: Callable) -> Tensor:
    """Wrap a forward result; record it when any parent needs gradients.

    ``vjp(g)`` returns one gradient array (or None) per parent.
    ``forward(*parent_arrays)`` recomputes ``out`` for replay.
    """
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    t._parents = ()
    t._vjp = None
    t._forward = None
    t.node_id = None
    t.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.node_id = next(_node_ids)
        t._parents = tuple(parents)
        t._vjp = vjp
        t._forward = forward
    return t


def _graph(root: Tensor) -> list[Tensor]:
    """All recorded nodes reachable from ``root``, in ascending node id."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t.node_id)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.ndim != 0:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss.node_id is None:
        raise GraphError("loss is not part of a recorded computation")
    order = _graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def replay(root: Tensor) -> bool:
    """Recompute every recorded node from its leaves; True if bit-identical."""
    values: dict[int, np.ndarray] = {}
    for node in _graph(root):
        if node._forward is None:
            values[id(node)] = node.data
            continue
        args = [values.get(id(p), p.data) for p in node._parents]
        again = node._forward(*args)
        if again.shape != node.data.shape or not np.array_equal(again, node.data):
            return False
        values[id(node)] = again
    return True


# ---------------------------------------------------------------- elementwise

def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "equal"
    if b.ndim == 0:
        return "scalar"
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return "trailing"
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")


def _unbroadcast(g: np.ndarray, kind: str, b_shape: tuple) -> np.ndarray:
    if kind == "equal":
        return g
    if kind == "scalar":
        return np.asarray(g.sum()).reshape(b_shape)
    lead = tuple(range(g.ndim - len(b_shape)))
    return g.sum(axis=lead)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (g, _unbroadcast(g, kind, b.shape)),
                 "add", lambda x, y: x + y)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (g, -_unbroadcast(g, kind, b.shape)),
                 "sub", lambda x, y: x - y)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (g * bd if a.requires_grad else None,
                            _unbroadcast(g * ad, kind, b.shape) if b.requires_grad else None),
                 "mul", lambda x, y: x * y)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by an element equal to 0")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g / bd if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), kind, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad / bd, (a, b), vjp, "div", lambda x, y: x / y)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg", lambda x: -x)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None),
                 "matmul", lambda x, y: x @ y)


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2d needs rank 2, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose2d",
                 lambda x: x.T.copy())


# ---------------------------------------------------------------- reductions

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def reduce(kind: str, x, axis: int) -> Tensor:
    """Reduce along one axis with ``sum``, ``mean`` or ``max``.

    ``max`` sends the whole gradient to the first maximal element.
    """
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    xd = x.data
    if kind == "sum":
        return _make(xd.sum(axis=axis), (x,),
                     lambda g: (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),),
                     "sum", lambda v: v.sum(axis=axis))
    if kind == "mean":
        if n == 0:
            raise ShapeError("mean over a zero-extent axis")
        return _make(xd.mean(axis=axis), (x,),
                     lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, xd.shape).copy(),),
                     "mean", lambda v: v.mean(axis=axis))
    if kind == "max":
        if n == 0:
            raise ShapeError("max over a zero-extent axis")
        idx = np.expand_dims(xd.argmax(axis=axis), axis)

        def vjp(g):
            out = np.zeros_like(xd)
            np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
            return (out,)

        return _make(xd.max(axis=axis), (x,), vjp, "max", lambda v: v.max(axis=axis))
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------- nonlinearities

def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(x) -> Tensor:
    # subgradient at exactly 0 is 0
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu",
                 lambda v: np.where(v > 0, v, 0.0))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh", np.tanh)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid", _sigmoid)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp", np.exp)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log", np.log)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(kind: str, x) -> Tensor:
    if kind == "identity":
        return as_tensor(x)
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def _softmax(v: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(v: np.ndarray, axis: int) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    y = _softmax(x.data, axis)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp, "softmax", lambda v: _softmax(v, axis))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    if x.shape[axis] < 1:
        raise ShapeError("log_softmax over an empty axis")
    y = _log_softmax(x.data, axis)
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), vjp, "log_softmax", lambda v: _log_softmax(v, axis))


# ---------------------------------------------------------------- data movement

def reshape(x, shape: Iterable[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return _make(out.copy(), (x,), lambda g: (g.reshape(src),), "reshape",
                 lambda v: v.reshape(shape).copy())


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of nothing")
    axis = _check_axis(xs[0], axis)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat extents disagree: {ref} vs {x.shape}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, vjp, "concat",
                 lambda *vs: np.concatenate(vs, axis=axis))


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    """Take ``x[..., start:stop, ...]`` along ``axis``."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice {start}:{stop} outside extent {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src = x.shape

    def vjp(g):
        out = np.zeros(src)
        out[index] = g
        return (out,)

    return _make(x.data[index].copy(), (x,), vjp, "slice", lambda v: v[index].copy())


def take_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("take_rows needs a rank-2 table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id outside [0, {table.shape[0]})")
    src = table.shape

    def vjp(g):
        out = np.zeros(src)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), vjp, "take_rows", lambda v: v[ids])


def detach(x) -> Tensor:
    return as_tensor(x).detach()


# ---------------------------------------------------------------- convolution

def _pad(v: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return v
    return np.pad(v, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(xd: np.ndarray, wd: np.ndarray, bd: np.ndarray, pad: int) -> np.ndarray:
    cout, cin, kh, kw = wd.shape
    win = np.lib.stride_tricks.sliding_window_view(_pad(xd, pad), (kh, kw), axis=(2, 3))
    # win: (B, Cin, Ho, Wo, kh, kw)
    return np.einsum("bchwij,ocij->bohw", win, wd, optimize=True) + bd[None, :, None, None]


def conv2d(x, w, b, pad: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation. x: (B,Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError("conv2d expects x rank 4, w rank 4, b rank 1")
    if x.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ShapeError(f"channel mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd, bd = x.data, w.data, b.data
    kh, kw = wd.shape[2:]
    out = _conv_forward(xd, wd, bd, pad)
    ho, wo = out.shape[2:]

    def vjp(g):
        xp = _pad(xd, pad)
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j])
        gx = gxp[:, :, pad:pad + xd.shape[2], pad:pad + xd.shape[3]] if pad else gxp
        return gx, gw, gb

    return _make(out, (x, w, b), vjp, "conv2d",
                 lambda xv, wv, bv: _conv_forward(xv, wv, bv, pad))


def _pool_windows(v: np.ndarray, k: int) -> np.ndarray:
    bsz, c, h, w = v.shape
    return (v.reshape(bsz, c, h // k, k, w // k, k)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(bsz, c, h // k, w // k, k * k))


def maxpool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling; ties go to the first element in row-major order."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"maxpool2d({k}) cannot tile shape {x.shape}")
    xd = x.data
    win = _pool_windows(xd, k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        bsz, c, h, w = xd.shape
        gw = np.zeros((bsz, c, h // k, w // k, k * k))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(bsz, c, h // k, w // k, k, k)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(bsz, c, h, w))
        return (gx,)

    return _make(out, (x,), vjp, "maxpool2d", lambda v: _pool_windows(v, k).max(axis=-1))


def stack_rows(xs: Sequence[Tensor]) -> Tensor:
    """Stack K tensors of shape (B, d) into (B, K, d)."""
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, (x.shape[0], 1) + x.shape[1:]) for x in xs], axis=1)
