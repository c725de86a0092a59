"""Dense tensors with tape-style reverse-mode differentiation.

Every primitive records its parents and a backward closure that maps the
output gradient to one gradient per parent. ``backward`` walks the graph once
in reverse topological order and accumulates gradients into ``.grad``.

The graph node and the value container are the same object (``Tensor``);
``Tensor.data`` holds the raw ``numpy`` array.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "count_ops",
    "matmul",
    "linear",
    "softmax",
    "log_softmax",
    "rms_norm",
    "rope_rotate",
    "rope_tables",
    "tanh",
    "exp",
    "log",
    "relu",
    "gelu",
    "sin",
    "maximum",
    "gather",
    "mask_fill",
    "mask_value",
    "concat",
    "stack",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes or indices are incompatible with the primitive."""


class _State(threading.local):
    """Per-thread recording flag and active op logs; graphs never cross threads."""

    def __init__(self):
        self.grad_enabled = True
        self.op_logs: list = []


_STATE = _State()


def is_grad_enabled() -> bool:
    return _STATE.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording the graph."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class OpLog:
    """Collected by :func:`count_ops`: op names and the operand shapes seen."""

    def __init__(self):
        self.counts: Counter = Counter()
        self.shapes: list[tuple[str, tuple[tuple[int, ...], ...]]] = []

    def record(self, name: str, shapes):
        self.counts[name] += 1
        self.shapes.append((name, shapes))

    def touched_extent(self, extent: int) -> bool:
        """True if any recorded operand had an axis of length ``extent``."""
        return any(extent in s for _, shapes in self.shapes for s in shapes)


@contextlib.contextmanager
def count_ops():
    log = OpLog()
    _STATE.op_logs.append(log)
    try:
        yield log
    finally:
        _STATE.op_logs.remove(log)


def _record(name, *arrays):
    if _STATE.op_logs:
        shapes = tuple(np.shape(a) for a in arrays)
        for log in _STATE.op_logs:
            log.record(name, shapes)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A value in the differentiation graph.

    ``data`` is a numpy array; ``grad`` is filled by :func:`backward` for
    every reachable tensor. Only ``grad`` is mutated after construction.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _STATE.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        out = a + b

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(out, (self, other), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a - b, (self, other), bw, "sub")

    def __rsub__(self, other):
        return _lift(other, self.dtype) - self

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        out = a / b

        def bw(g):
            ga = g / b
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

        return Tensor._make(out, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return _lift(other, self.dtype) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self.data
        out = a**p

        def bw(g):
            return (g * p * a ** (p - 1),)

        return Tensor._make(out, (self,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    # shape ------------------------------------------------------------------

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        return Tensor._make(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")

    def broadcast_to(self, shape) -> Tensor:
        src = self.shape
        out = np.broadcast_to(self.data, shape)
        return Tensor._make(out, (self,), lambda g: (_unbroadcast(g, src),), "broadcast")

    def __getitem__(self, idx) -> Tensor:
        if isinstance(idx, Tensor):
            raise TypeError("index with arrays, not tensors")
        src_shape, dtype = self.shape, self.dtype
        try:
            out = self.data[idx]
        except IndexError as exc:
            raise DimensionError(str(exc)) from None

        def bw(g):
            full = np.zeros(src_shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        def bw_basic(g):
            full = np.zeros(src_shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return Tensor._make(out, (self,), bw_basic if _is_basic_index(idx) else bw, "getitem")

    # reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        src = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src),)

        return Tensor._make(np.asarray(out), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def tanh(self) -> Tensor:
        return tanh(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, np.float64), _lift(b, np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    _record("matmul", x, y)
    try:
        out = x @ y
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    xd, w = x.data, weight.data
    _record("linear", xd, w)
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ w
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.T).reshape(xd.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    _record("softmax", d)
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw, "log_softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    d, w = x.data, gain.data
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    xhat = d * inv
    out = xhat * w
    n = d.shape[-1]

    def bw(g):
        gxhat = g * w
        gx = inv * (gxhat - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, w.shape)

    return Tensor._make(out, (x, gain), bw, "rms_norm")


def rope_tables(positions, dim: int, base: float, dtype=np.float64):
    """cos/sin tables of shape (len(positions), dim // 2)."""
    if dim % 2:
        raise DimensionError(f"rope: last extent {dim} is odd")
    pos = np.asarray(positions, dtype=np.float64)
    freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos[:, None] * freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: Tensor, positions, base: float = 100000.0, tables=None) -> Tensor:
    """Rotate consecutive pairs of the last axis by position-dependent angles.

    ``positions`` indexes the second-to-last axis of ``x``. Pair ``i`` turns
    at frequency ``base ** (-2i / dim)``.
    """
    d = x.data
    dim = d.shape[-1]
    if dim % 2:
        raise DimensionError(f"rope: last extent {dim} is odd")
    cos, sin = tables if tables is not None else rope_tables(positions, dim, base, d.dtype)
    if cos.shape[0] != d.shape[-2]:
        raise DimensionError("rope: positions do not match the sequence axis")
    pairs = d.reshape(d.shape[:-1] + (dim // 2, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    out = np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1).reshape(d.shape)

    def bw(g):
        gp = g.reshape(pairs.shape)
        ga, gb = gp[..., 0], gp[..., 1]
        return (np.stack([ga * cos + gb * sin, -ga * sin + gb * cos], axis=-1).reshape(d.shape),)

    return Tensor._make(out, (x,), bw, "rope")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.log(d), (x,), lambda g: (g / d,), "log")


def sin(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.sin(d), (x,), lambda g: (g * np.cos(d),), "sin")


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    return Tensor._make(d * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    d = x.data
    sq = d * d
    t = np.tanh(d * (_GELU_C + (_GELU_C * 0.044715) * sq))
    out = 0.5 * d * (1.0 + t)

    def bw(g):
        dinner = _GELU_C + (3 * _GELU_C * 0.044715) * sq
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), bw, "gelu")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, np.float64), _lift(b, np.float64)
    x, y = a.data, b.data
    take_a = x >= y

    def bw(g):
        return _unbroadcast(g * take_a, x.shape), _unbroadcast(g * ~take_a, y.shape)

    return Tensor._make(np.maximum(x, y), (a, b), bw, "maximum")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clamp to [lo, hi]; the gradient passes inside the closed interval."""
    d = x.data
    keep = (d >= lo) & (d <= hi)
    return Tensor._make(np.clip(d, lo, hi), (x,), lambda g: (g * keep,), "clip")


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` (rows, by default)."""
    idx = np.asarray(index, dtype=np.intp)
    d = x.data
    n = d.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"gather: index out of range for extent {n}")
    out = np.take(d, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(d)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._make(out, (x,), bw, "gather")


def mask_value(dtype) -> float:
    return -1e9 if np.dtype(dtype) == np.float32 else -1e30


def mask_fill(x: Tensor, mask, value: float | None = None) -> Tensor:
    """Overwrite positions where ``mask`` is true with a large negative constant."""
    d = x.data
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, d.shape)
    except ValueError:
        raise DimensionError(f"mask_fill: mask {mask.shape} vs {d.shape}") from None
    fill = mask_value(d.dtype) if value is None else value
    out = np.where(mask, d.dtype.type(fill), d)
    return Tensor._make(out, (x,), lambda g: (np.where(mask, 0, g),), "mask_fill")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(out, tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every tensor reachable from a scalar ``output``.

    Returns a map from ``id(tensor)`` to its gradient.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    order = _topo_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return grads


Tensor.backward = backward


def finite_diff_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Iterable[Tensor],
    step: float = 1e-5,
    points: int = 3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is evaluated with no arguments when ``x`` is a list of tensors the
    closure already captures, and with ``x`` itself when a single tensor is
    passed. Relative error uses ``max(|analytic|, |numeric|, 1e-8)``.
    ``points`` selects the 3-point (error O(h^2)) or 5-point (O(h^4)) central
    stencil; the latter tolerates a larger step, which keeps roundoff small
    for gradients far below the loss scale.
    """
    if points not in (3, 5):
        raise ValueError("points must be 3 or 5")
    single = isinstance(x, Tensor)
    leaves = [x] if single else list(x)

    def call():
        return f(x) if single else f()

    for leaf in leaves:
        leaf.data = np.array(leaf.data, order="C")  # keeps 0-d leaves 0-d
        leaf.requires_grad = True
        leaf.grad = None
    out = call()
    backward(out)
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    with no_grad():
        for leaf, ga in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                hi, lo = orig + step, orig - step
                flat[i] = hi
                fp = float(call().data)
                flat[i] = lo
                fm = float(call().data)
                if points == 3:
                    # divide by the step actually taken, not the nominal one
                    num = (fp - fm) / (hi - lo)
                else:
                    flat[i] = orig + 2 * step
                    fpp = float(call().data)
                    flat[i] = orig - 2 * step
                    fmm = float(call().data)
                    num = (8.0 * (fp - fm) - (fpp - fmm)) / (12.0 * step)
                flat[i] = orig
                denom = max(abs(gflat[i]), abs(num), 1e-8)
                worst = max(worst, abs(gflat[i] - num) / denom)
    return worst
