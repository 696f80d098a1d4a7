"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable computation is expressed through a closed set of
primitives (see ``PRIMITIVES``).  A primitive application whose inputs
require gradients records a :class:`Node`; :func:`backward` linearises the
recorded graph into a :class:`Tape` and sweeps it in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "PRIMITIVES",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "apply_primitive",
    "backward",
    "default_dtype",
    "grad_enabled",
    "no_grad",
    "precision",
]


class ShapeError(ValueError):
    """Input shapes are invalid for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in tensor data."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"non-finite value produced by '{op}'" + (f": {message}" if message else ""))


class TapeError(RuntimeError):
    """Backward was requested on an empty or already consumed tape."""


_state = threading.local()


def _get(name: str, default: Any) -> Any:
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    ``precision(np.float64)`` is the verification mode used by gradient checks.
    """
    old = _get("dtype", np.float32)
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextmanager
def no_grad() -> Iterator[None]:
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """Dense array that may participate in gradient recording.

    ``data`` is never modified in place by the library: optimizers rebind it
    to a fresh array, so arrays shared between copies stay untouched.
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None,
                 dtype: Any = None, _check: bool = True):
        arr = np.array(data, dtype=dtype if dtype is not None else default_dtype())
        if _check and arr.size and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", f"leaf {name or ''} contains NaN/Inf")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; every path goes through apply_primitive
    def __add__(self, other: Any) -> "Tensor":
        return apply_primitive("add", [self, _lift(other, self)])

    def __radd__(self, other: Any) -> "Tensor":
        return apply_primitive("add", [_lift(other, self), self])

    def __sub__(self, other: Any) -> "Tensor":
        return apply_primitive("sub", [self, _lift(other, self)])

    def __rsub__(self, other: Any) -> "Tensor":
        return apply_primitive("sub", [_lift(other, self), self])

    def __mul__(self, other: Any) -> "Tensor":
        return apply_primitive("mul", [self, _lift(other, self)])

    def __rmul__(self, other: Any) -> "Tensor":
        return apply_primitive("mul", [_lift(other, self), self])

    def __neg__(self) -> "Tensor":
        return apply_primitive("mul", [self, _lift(-1.0, self)])

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply_primitive("matmul", [self, other])

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=tuple(shape))

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype))


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    saved: Any
    consumed: bool = False


@dataclass
class Tape:
    """Recorded primitive applications in topological order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        if loss._node is None:
            raise TapeError("tape is empty: loss was not produced by a recorded primitive")
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(loss._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append((t._node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


# --------------------------------------------------------------------------
# primitive registry

ForwardFn = Callable[..., tuple[np.ndarray, Any]]
BackwardFn = Callable[..., Sequence[np.ndarray | None]]

PRIMITIVES: dict[str, tuple[ForwardFn, BackwardFn]] = {}


def _primitive(name: str):
    def deco(pair_factory):
        fwd, bwd = pair_factory()
        PRIMITIVES[name] = (fwd, bwd)
        return pair_factory
    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


@_primitive("add")
def _add():
    def fwd(a, b):
        _broadcast_shape(a, b, "add")
        return a + b, None

    def bwd(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return fwd, bwd


@_primitive("sub")
def _sub():
    def fwd(a, b):
        _broadcast_shape(a, b, "sub")
        return a - b, None

    def bwd(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return fwd, bwd


@_primitive("mul")
def _mul():
    def fwd(a, b):
        _broadcast_shape(a, b, "mul")
        return a * b, None

    def bwd(g, saved, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    return fwd, bwd


@_primitive("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return np.matmul(a, b), None

    def bwd(g, saved, a, b):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return fwd, bwd


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


@_primitive("conv2d")
def _conv2d():
    # x: (B, Cin, H, W), w: (Cout, Cin, kh, kw); cross-correlation like most frameworks
    def fwd(x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: bad shapes x{x.shape} w{w.shape}")
        p = padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        kh, kw = w.shape[2:]
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
        win = _windows(xp, kh, kw, stride)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), xp

    def bwd(g, xp, x, w, stride=1, padding=0):
        kh, kw = w.shape[2:]
        win = _windows(xp, kh, kw, stride)
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w, axes=([1], [0]))  # (B, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros_like(xp)
        ho, wo = g.shape[2:]
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = padding
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        return gx, gw
    return fwd, bwd


@_primitive("maxpool2d")
def _maxpool2d():
    def fwd(x, k=2):
        b, c, h, w = x.shape
        if h % k or w % k:
            raise ShapeError(f"maxpool2d: spatial size {(h, w)} not divisible by {k}")
        blocks = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, h // k, w // k, k * k)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, idx

    def bwd(g, idx, x, k=2):
        b, c, h, w = x.shape
        onehot = np.zeros(idx.shape + (k * k,), dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(b, c, h, w),)
    return fwd, bwd


@_primitive("global_avg_pool")
def _gap():
    def fwd(x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects (B, C, H, W), got {x.shape}")
        return x.mean(axis=(2, 3)), None

    def bwd(g, saved, x):
        h, w = x.shape[2:]
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    return fwd, bwd


@_primitive("relu")
def _relu():
    def fwd(x):
        return np.maximum(x, 0), None

    def bwd(g, saved, x):
        return (g * (x > 0),)
    return fwd, bwd


@_primitive("softmax")
def _softmax():
    def fwd(x, axis=-1):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        out = z / z.sum(axis=axis, keepdims=True)
        return out, out

    def bwd(g, s, x, axis=-1):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return fwd, bwd


@_primitive("log_softmax")
def _log_softmax():
    def fwd(x, axis=-1):
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return out, out

    def bwd(g, out, x, axis=-1):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return fwd, bwd


@_primitive("exp")
def _exp():
    def fwd(x):
        out = np.exp(x)
        return out, out

    def bwd(g, out, x):
        return (g * out,)
    return fwd, bwd


@_primitive("log")
def _log():
    def fwd(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x), None

    def bwd(g, saved, x):
        return (g / x,)
    return fwd, bwd


@_primitive("square")
def _square():
    def fwd(x):
        return x * x, None

    def bwd(g, saved, x):
        return (2 * g * x,)
    return fwd, bwd


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: Any, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _count(shape: tuple[int, ...], axis: Any) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


@_primitive("sum")
def _sum():
    def fwd(x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), None

    def bwd(g, saved, x, axis=None, keepdims=False):
        return (_expand(g, x.shape, axis, keepdims).copy(),)
    return fwd, bwd


@_primitive("mean")
def _mean():
    def fwd(x, axis=None, keepdims=False):
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None

    def bwd(g, saved, x, axis=None, keepdims=False):
        return (_expand(g / _count(x.shape, axis), x.shape, axis, keepdims).copy(),)
    return fwd, bwd


@_primitive("l2_norm_sq")
def _l2_norm_sq():
    def fwd(x, axis=-1):
        return np.asarray((x * x).sum(axis=axis)), None

    def bwd(g, saved, x, axis=-1):
        return (2 * x * _expand(g, x.shape, axis, False),)
    return fwd, bwd


@_primitive("gather")
def _gather():
    # np.take semantics: any integer index array along one axis
    def fwd(x, index=None, axis=0):
        index = np.asarray(index)
        if index.size and (index.min() < -x.shape[axis] or index.max() >= x.shape[axis]):
            raise ShapeError(f"gather: index out of range for axis {axis} of size {x.shape[axis]}")
        return np.take(x, index, axis=axis), None

    def bwd(g, saved, x, index=None, axis=0):
        index = np.asarray(index)
        gx = np.zeros_like(x)
        ax = axis % x.ndim
        # bring the gathered axis to the front so np.add.at can scatter along it
        gx_front = np.moveaxis(gx, ax, 0)
        g_front = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        np.add.at(gx_front, index, g_front)
        return (gx,)
    return fwd, bwd


@_primitive("concat")
def _concat():
    def fwd(*xs, axis=0):
        try:
            return np.concatenate(xs, axis=axis), None
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from exc

    def bwd(g, saved, *xs, axis=0):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return fwd, bwd


@_primitive("reshape")
def _reshape():
    def fwd(x, shape=()):
        try:
            return x.reshape(shape), None
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc

    def bwd(g, saved, x, shape=()):
        return (g.reshape(x.shape),)
    return fwd, bwd


# --------------------------------------------------------------------------


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Evaluate primitive ``op`` and record it when any input requires grad."""
    try:
        fwd, _ = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive '{op}'") from None
    arrays = [t.data for t in inputs]
    out, saved = fwd(*arrays, **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    result = Tensor._wrap(np.asarray(out))
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(op, tuple(inputs), result, attrs, saved)
    return result


def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. The tape is consumed
    unless ``retain_graph`` is set; a second sweep then raises :class:`TapeError`.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    if any(node.consumed for node in tape.nodes):
        raise TapeError("tape already consumed by a previous backward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        _, bwd = PRIMITIVES[node.op]
        in_grads = bwd(g, node.saved, *[t.data for t in node.inputs], **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    if not retain_graph:
        for node in tape.nodes:
            node.consumed = True
            node.saved = None
    return tape
