"""Minimal numpy-backed tensor with reverse-mode differentiation.

Only the operations the segmentation pipeline needs are provided: elementwise
arithmetic with numpy broadcasting, reductions, reshape/transpose, matmul,
softmax, 2D convolution, bilinear resize, LeakyReLU and channel concatenation.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array plus an optional record of the op that produced it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a, p: float) -> Tensor:
    a = tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    a = tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * slope)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * slope),))


# -- reductions and shape ------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def narrow(a, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the first axis."""
    a = tensor(a)

    def fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


# -- convolution -------------------------------------------------------


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of ``x`` (C×H×W or N×C×H×W) with ``kernel`` (O×C×k×k).

    ``padding=None`` means "same" padding, k // 2.
    """
    x, kernel = tensor(x), tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W input and 4D kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d needs an odd square kernel, got {kh}×{kw}")
    k = kh
    pad = k // 2 if padding is None else padding
    wmat = kernel.data.reshape(o, c * k * k)

    if k == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride]
        oh, ow = xs.shape[2:]
        cols = xs.reshape(n, c, oh * ow)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        patches = [
            xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            for i in range(k)
            for j in range(k)
        ]
        cols = np.stack(patches, axis=2).reshape(n, c * k * k, oh * ow)
    out = np.matmul(wmat, cols)
    if bias is not None:
        bias = tensor(bias)
        out = out + bias.data[None, :, None]
    out = out.reshape(n, o, oh, ow)
    if squeeze:
        out = out[0]

    def fn(g):
        g4 = g[None] if squeeze else g
        gm = g4.reshape(n, o, oh * ow)
        gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(wmat.T, gm)
        if k == 1 and pad == 0:
            gx = np.zeros_like(xd)
            gx[:, :, ::stride, ::stride] = gcols.reshape(n, c, oh, ow)
        else:
            gcols = gcols.reshape(n, c, k, k, oh, ow)
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[
                        :, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride
                    ] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if squeeze:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, fn)


# -- bilinear resize ---------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """1D interpolation matrix (n_out × n_in), half-pixel centres, edge clamped."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize over the last two axes."""
    x = tensor(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target must be >= 1, got {out_h}×{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    rh = bilinear_matrix(h, out_h, x.dtype)
    rw = bilinear_matrix(w, out_w, x.dtype)
    out = rh @ x.data @ rw.T
    return _make(out, (x,), lambda g: (rh.T @ g @ rw,))
