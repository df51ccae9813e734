"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records a closure that maps the output gradient to parent
gradients.  ``Tensor.backward`` walks the recorded graph in reverse
topological order.  Gradients are accumulated in sequential order so results
are bit-reproducible for a fixed input.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p: float): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))
    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * 0.5 / out))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: _accum(a, g * mask))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: _accum(a, g * scale))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.dtype)
    return _make(out, (a,), lambda g: _accum(a, g * _sigmoid(a.data)))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: _accum(a, g * (s + out * (1.0 - s))))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "softplus": softplus,
    "silu": silu,
}


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape))
    return _make(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g / n, a.shape))
    return _make(out, (a,), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis (keepdims=False)."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        _accum(a, np.expand_dims(g, axis) * (e / s))
    return _make(out, (a,), bw)


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    return _make(a.data.astype(dtype), (a,), lambda g: _accum(a, g.astype(a.dtype)))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)))


def index(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)
    return _make(a.data[idx], (a,), bw)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            _accum(t, np.take(g, i, axis=axis))
    return _make(out, ts, bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for i, t in enumerate(ts):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            _accum(t, g[tuple(sl)])
    return _make(out, ts, bw)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- 3D convolution kernels
# Layout: activations (N, C, D, H, W); conv weights (O, C, k, k, k).

def _pad3(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    win = sliding_window_view(_pad3(x, pad), (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    win = _windows(x, w.shape[2], stride, pad)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def conv3d_input_grad(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                      in_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of ``conv3d_forward`` with respect to its input."""
    n, c = in_shape[0], in_shape[1]
    d, h, wd = in_shape[2:]
    k = w.shape[2]
    do, ho, wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, Do, Ho, Wo, C, k, k, k)
    cols = np.moveaxis(cols, 4, 1)                # (N, C, Do, Ho, Wo, k, k, k)
    gxp = np.zeros((n, c, d + 2 * pad, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    ed, eh, ew = stride * (do - 1) + 1, stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for a in range(k):
        for b in range(k):
            for e in range(k):
                gxp[:, :, a:a + ed:stride, b:b + eh:stride, e:e + ew:stride] += cols[..., a, b, e]
    return gxp[:, :, pad:pad + d, pad:pad + h, pad:pad + wd]


def conv3d_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    win = _windows(x, k, stride, pad)
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    out = conv3d_forward(x.data, w.data, stride, pad)

    def bw(g):
        if x.requires_grad:
            _accum(x, conv3d_input_grad(g, w.data, stride, pad, x.shape))
        if w.requires_grad:
            _accum(w, conv3d_weight_grad(x.data, g, w.shape[2], stride, pad))
    return _make(out, (x, w), bw)


def conv_transpose3d(x: Tensor, w: Tensor, stride: int, pad: int,
                     out_spatial: tuple[int, int, int]) -> Tensor:
    """Transposed convolution; ``w`` has shape (C_in, C_out, k, k, k).

    Defined as the exact adjoint of ``conv3d`` mapping ``out_spatial`` down to
    the spatial size of ``x``.
    """
    n = x.shape[0]
    shape = (n, w.shape[1]) + tuple(out_spatial)
    expect = tuple((s + 2 * pad - w.shape[2]) // stride + 1 for s in out_spatial)
    if expect != x.shape[2:]:
        raise ValueError(f"transposed conv cannot map {x.shape[2:]} to {tuple(out_spatial)}")
    out = conv3d_input_grad(x.data, w.data, stride, pad, shape)

    def bw(g):
        if x.requires_grad:
            _accum(x, conv3d_forward(g, w.data, stride, pad))
        if w.requires_grad:
            _accum(w, conv3d_weight_grad(g, x.data, w.shape[2], stride, pad))
    return _make(out, (x, w), bw)


def leaves(named: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in named}
