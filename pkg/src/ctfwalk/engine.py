"""Minimal reverse-mode differentiation over numpy arrays.

Every differentiable op creates a `Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Nodes carry a global
creation sequence number, so sorting reachable nodes by that number in
reverse replays the recorded operations in reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-9
NORM_EPS = 1e-12

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        elif arr.dtype.kind == "f" and dtype is None and arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.name = name

    # -- basic info ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def square(self):
        return square(self)

    # -- reverse pass -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every grad-requiring node."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _reachable(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
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


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(a, eps)``; clamped entries get zero gradient."""
    a = as_tensor(a)
    clamped = a.data < eps
    x = np.where(clamped, eps, a.data)
    return _make(np.log(x), (a,), lambda g: (np.where(clamped, 0.0, g / x),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _make(out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation in NHWC layout.

    ``weight`` is ``(kh, kw, cin, cout)``; zero padding defaults to ``kh // 2``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    kh, kw, cin, cout = weight.shape
    pad = kh // 2 if padding is None else padding
    n, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (n, hp-kh+1, wp-kw+1, cin, kh, kw)
    cols = win[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(cols.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        grads = [None, gw]
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
            grads[0] = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def l2_normalize(a, eps: float = NORM_EPS) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------
def _segment_sum(idx: np.ndarray, vals: np.ndarray, size: int) -> np.ndarray:
    """Sum rows of ``vals`` (leading axis matching flat ``idx``) into ``size`` buckets."""
    idx = idx.reshape(-1)
    tail_shape = vals.shape[1:]
    flat = vals.reshape(idx.size, -1)
    m = flat.shape[1]
    if m == 1:
        out = np.bincount(idx, weights=flat[:, 0], minlength=size)
    else:
        keys = (idx[:, None] * m + np.arange(m)).reshape(-1)
        out = np.bincount(keys, weights=flat.reshape(-1), minlength=size * m)
    return out.reshape((size,) + tail_shape)


def gather(a, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along axis 0; output shape ``idx.shape + a.shape[1:]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for axis of length {a.shape[0]}")
    out = a.data[idx]

    def backward(g):
        flat = g.reshape((idx.size,) + a.shape[1:])
        return (_segment_sum(idx, flat, a.shape[0]),)

    return _make(out, (a,), backward)


def scatter_add(a, idx: np.ndarray, size: int) -> Tensor:
    """Sum rows of ``a`` into ``size`` buckets selected by ``idx`` (length ``a.shape[0]``)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:1]:
        raise ShapeError(f"scatter_add: index shape {idx.shape} does not match {a.shape[:1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError("scatter_add: index out of range")
    out = _segment_sum(idx, a.data, size)
    return _make(out, (a,), lambda g: (g[idx],))


def bilinear_sample(img, x, y) -> Tensor:
    """Sample an ``(H, W, C)`` map at real coordinates with clamp-to-edge.

    ``x`` and ``y`` share a shape ``S``; the result has shape ``S + (C,)``.
    Coordinates may be tensors, in which case gradients flow into them except
    where clamping is active.
    """
    img = as_tensor(img)
    if img.ndim != 3:
        raise ShapeError(f"bilinear_sample expects an (H, W, C) map, got {img.shape}")
    xt, yt = as_tensor(x), as_tensor(y)
    if xt.shape != yt.shape:
        raise ShapeError("bilinear_sample: x and y shapes differ")
    h, w, c = img.shape
    xs = np.clip(xt.data, 0.0, w - 1)
    ys = np.clip(yt.data, 0.0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0)[..., None]
    wy = (ys - y0)[..., None]
    flat = img.data.reshape(h * w, c)
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = top + wy * (bot - top)
    x_free = ((xt.data >= 0) & (xt.data <= w - 1))[..., None]
    y_free = ((yt.data >= 0) & (yt.data <= h - 1))[..., None]

    def backward(g):
        gi = gx = gy = None
        if img.requires_grad:
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            vals = np.concatenate([
                (g * (1 - wx) * (1 - wy)).reshape(-1, c),
                (g * wx * (1 - wy)).reshape(-1, c),
                (g * (1 - wx) * wy).reshape(-1, c),
                (g * wx * wy).reshape(-1, c),
            ])
            gi = _segment_sum(idx, vals, h * w).reshape(h, w, c)
        if xt.requires_grad:
            dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            gx = (g * dx * x_free).sum(axis=-1)
        if yt.requires_grad:
            gy = (g * (bot - top) * y_free).sum(axis=-1)
        return gi, gx, gy

    return _make(out, (img, xt, yt), backward)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------
def grad_check(fn: Callable[[Tensor], Tensor], x, step: float | None = None,
               indices: np.ndarray | None = None) -> float:
    """Largest relative gap between the analytic and central-difference gradient.

    The per-element step defaults to ``1e-5 * (1 + |x|)``. ``indices`` restricts
    the check to selected flat positions of ``x``, which keeps checks over
    large parameter vectors affordable.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = fn(xt)
    if not out.requires_grad:
        analytic = np.zeros_like(base)
    else:
        out.backward()
        analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    flat = base.reshape(-1)
    positions = np.arange(flat.size) if indices is None else np.asarray(indices).reshape(-1)
    worst = 0.0
    with no_grad():
        for i in positions:
            h = step if step is not None else 1e-5 * (1.0 + abs(flat[i]))
            plus = flat.copy()
            plus[i] += h
            minus = flat.copy()
            minus[i] -= h
            f_plus = float(fn(Tensor(plus.reshape(base.shape))).data)
            f_minus = float(fn(Tensor(minus.reshape(base.shape))).data)
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
