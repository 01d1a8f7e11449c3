"""Dense float32 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy float32 array. Operations build a graph of nodes;
``backward`` on a scalar loss walks the graph once in reverse topological
order and accumulates adjoints into every reachable tensor that has
``requires_grad`` set. The engine is deliberately small: only the ops the
models in this repository need, CPU only, no general broadcasting beyond
numpy's trailing-dim rule.

Determinism contract: forward passes are bit-stable for fixed inputs.
Reductions accumulate in float64 and cast back to float32; matrix products
go through BLAS sgemm, which is run-to-run stable on a fixed machine and
thread count.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "set_finite_checks",
    "matmul",
    "relu",
    "gelu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "reshape",
    "transpose",
    "slice_axis",
    "concat",
    "softmax",
    "softmax_attention",
    "layernorm",
    "reduce_sum",
    "reduce_mean",
    "reduce_min",
    "conv3d",
    "backward",
]

_GRAD_ENABLED = True
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Enable per-op NaN/Inf validation (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (sampling, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_f32(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    return a


class Tensor:
    """A node in the autodiff graph holding a float32 array."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_owned", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._grad_owned = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- introspection -----------------------------------------------------

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        # First hit stores the array (possibly shared, never mutated);
        # second hit replaces it with a fresh owned sum; later hits add in place.
        if self.grad is None:
            self.grad = g if g.dtype == np.float32 else g.astype(np.float32)
            self._grad_owned = False
        elif not self._grad_owned:
            self.grad = self.grad + g
            self._grad_owned = True
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar. Visits each node exactly once."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    # -- operator sugar -----------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *dims):
        return reshape(self, dims if len(dims) > 1 or isinstance(dims[0], int) else dims[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(np.float32, copy=False)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"non-broadcastable shapes {a.shape} and {b.shape}") from exc


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)
    data = a.data + b.data

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return fn

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)
    data = a.data - b.data

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return fn

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)
    data = a.data * b.data

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return fn

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)
    data = a.data / b.data

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return fn

    return _make(data, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)

    def bw(out):
        def fn(g):
            a._accumulate(-g)

        return fn

    return _make(-a.data, (a,), bw)


def relu(a) -> Tensor:
    a = _lift(a)
    data = np.maximum(a.data, 0)

    def bw(out):
        def fn(g):
            a._accumulate(g * (a.data > 0))

        return fn

    return _make(data, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Tanh-approximation GELU with analytic derivative."""
    a = _lift(a)
    x = a.data
    u = x * x
    u *= _GELU_A
    u += 1.0
    u *= x
    u *= _GELU_C
    th = np.tanh(u, out=u)
    data = 0.5 * x * (1.0 + th)

    def bw(out):
        def fn(g):
            du = x * x
            du *= 3.0 * _GELU_A
            du += 1.0
            du *= _GELU_C
            du *= 1.0 - th * th
            du *= 0.5 * x
            du += 0.5 * (1.0 + th)
            du *= g
            a._accumulate(du)

        return fn

    return _make(data, (a,), bw)


def tanh(a) -> Tensor:
    a = _lift(a)
    data = np.tanh(a.data)

    def bw(out):
        def fn(g):
            a._accumulate(g * (1.0 - out.data * out.data))

        return fn

    return _make(data, (a,), bw)


def exp(a) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)

    def bw(out):
        def fn(g):
            a._accumulate(g * out.data)

        return fn

    return _make(data, (a,), bw)


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive input")
    data = np.log(a.data)

    def bw(out):
        def fn(g):
            a._accumulate(g / a.data)

        return fn

    return _make(data, (a,), bw)


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative input")
    data = np.sqrt(a.data)

    def bw(out):
        def fn(g):
            a._accumulate(g * (0.5 / np.maximum(out.data, 1e-12)))

        return fn

    return _make(data, (a,), bw)


def absolute(a) -> Tensor:
    a = _lift(a)
    data = np.abs(a.data)

    def bw(out):
        def fn(g):
            a._accumulate(g * np.sign(a.data))

        return fn

    return _make(data, (a,), bw)


# -- shape ops ----------------------------------------------------------------


def reshape(a, dims) -> Tensor:
    a = _lift(a)
    dims = tuple(dims)
    data = a.data.reshape(dims)

    def bw(out):
        def fn(g):
            a._accumulate(g.reshape(a.shape))

        return fn

    return _make(data, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def bw(out):
        def fn(g):
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

        return fn

    return _make(data, (a,), bw)


def concat(tensors: Sequence["Tensor"], axis: int = -1) -> Tensor:
    """Concatenate along one axis; adjoint slices the gradient back apart."""
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(out):
        def fn(g):
            off = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    idx = tuple(
                        slice(None) if i != axis else slice(off, off + s) for i in range(g.ndim)
                    )
                    t._accumulate(np.ascontiguousarray(g[idx]))
                off += s

        return fn

    return _make(data, tuple(tensors), bw)


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice along one axis; adjoint zero-pads back."""
    a = _lift(a)
    axis = axis % a.ndim
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    data = np.ascontiguousarray(a.data[idx])

    def bw(out):
        def fn(g):
            full = np.zeros(a.shape, dtype=np.float32)
            full[idx] = g
            a._accumulate(full)

        return fn

    return _make(data, (a,), bw)


# -- reductions ----------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axis = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def bw(out):
        def fn(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

        return fn

    return _make(data, (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    ax = _norm_axis(axis, a.ndim)
    count = a.data.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    data = a.data.mean(axis=ax, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def bw(out):
        def fn(g):
            gg = g / count
            if ax is not None and not keepdims:
                gg = np.expand_dims(gg, ax)
            a._accumulate(np.broadcast_to(gg, a.shape).astype(np.float32))

        return fn

    return _make(data, (a,), bw)


def reduce_min(a, axis: int, keepdims: bool = False) -> Tensor:
    """Min over one axis; adjoint routes to the first argmin (ties broken low)."""
    a = _lift(a)
    (ax,) = _norm_axis(axis, a.ndim)
    data = a.data.min(axis=ax, keepdims=keepdims)
    arg = a.data.argmin(axis=ax)

    def bw(out):
        def fn(g):
            gg = g if keepdims else np.expand_dims(g, ax)
            full = np.zeros(a.shape, dtype=np.float32)
            sel = np.expand_dims(arg, ax)
            np.put_along_axis(full, sel, np.ascontiguousarray(gg, dtype=np.float32), ax)
            a._accumulate(full)

        return fn

    return _make(data, (a,), bw)


# -- matmul and fused network ops ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(out):
        def fn(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data).reshape(a.shape)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                if a.ndim > 1:
                    gb = np.swapaxes(a.data, -1, -2) @ g
                else:
                    gb = np.outer(a.data, g).reshape(b.shape)
                b._accumulate(_unbroadcast(gb, b.shape))

        return fn

    return _make(data, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    data = e / s

    def bw(out):
        def fn(g):
            y = out.data
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

        return fn

    return _make(data, (a,), bw)


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b over the last axis; the dense-layer fast path."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine inner dims disagree: {x.shape} x {w.shape}")
    data = x.data @ w.data
    data += b.data

    def bw(out):
        def fn(g):
            if x.requires_grad:
                x._accumulate(g @ w.data.T)
            if w.requires_grad:
                w._accumulate(x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))
            if b.requires_grad:
                b._accumulate(g.reshape(-1, w.shape[1]).sum(axis=0))

        return fn

    return _make(data, (x, w, b), bw)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine. gain/bias broadcast over rows."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(out):
        def fn(g):
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (dxhat - m1 - xhat * m2))
            if gain.requires_grad:
                gain._accumulate(_unbroadcast(g * xhat, gain.shape))
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.shape))

        return fn

    return _make(data, (x, gain, bias), bw)


def softmax_attention(q, k, v, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over (..., tokens, dim).

    Fused forward/backward; attention rows sum to 1 by construction.
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ValueError("q, k, v must share leading dims and token count")
    d = q.shape[-1]
    dv = v.shape[-1]
    if d % heads != 0 or dv % heads != 0:
        raise ValueError(f"dims {d}/{dv} not divisible by {heads} heads")
    dh, dvh = d // heads, dv // heads
    n = q.shape[-2]
    lead = q.shape[:-2]
    scale = 1.0 / math.sqrt(dh)

    def split(arr, hd):
        a = arr.reshape(lead + (n, heads, hd))
        return np.ascontiguousarray(np.moveaxis(a, -2, len(lead)))  # (..., heads, n, hd)

    def unsplit(arr):
        a = np.moveaxis(arr, len(lead), -2)  # (..., n, heads, hd)
        return np.ascontiguousarray(a).reshape(lead + (n, arr.shape[-1] * heads))

    qh = split(q.data, dh) * np.float32(scale)
    kh = split(k.data, dh)
    vh = split(v.data, dvh)
    s = qh @ np.ascontiguousarray(np.swapaxes(kh, -1, -2))
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    att = s
    data = unsplit(att @ vh)

    def bw(out):
        def fn(g):
            gh = split(g, dvh)
            if v.requires_grad:
                v._accumulate(unsplit(np.swapaxes(att, -1, -2) @ gh))
            if q.requires_grad or k.requires_grad:
                da = gh @ np.swapaxes(vh, -1, -2)
                ds = att * (da - (da * att).sum(axis=-1, keepdims=True))
                if q.requires_grad:
                    q._accumulate(unsplit((ds @ kh) * np.float32(scale)))
                if k.requires_grad:
                    k._accumulate(unsplit(np.swapaxes(ds, -1, -2) @ qh))

        return fn

    return _make(data, (q, k, v), bw)


# -- 3D convolution ------------------------------------------------------------


def _windows3(xp: np.ndarray, kd: int, kh: int, kw: int) -> np.ndarray:
    n, fp, hp, wp, c = xp.shape
    f, h, w = fp - kd + 1, hp - kh + 1, wp - kw + 1
    s = xp.strides
    shape = (n, f, h, w, kd, kh, kw, c)
    strides = (s[0], s[1], s[2], s[3], s[1], s[2], s[3], s[4])
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


def _conv3d_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kd, kh, kw, cin, cout = w.shape
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))
    n, f, h, wd = x.shape[0], x.shape[1], x.shape[2], x.shape[3]
    cols = _windows3(xp, kd, kh, kw).reshape(n * f * h * wd, kd * kh * kw * cin)
    y = cols @ w.reshape(-1, cout)
    return y.reshape(n, f, h, wd, cout)


def conv3d(x, w, b) -> Tensor:
    """Stride-1, same-zero-padded 3D convolution.

    x: (N, F, H, W, Cin); w: (kd, kh, kw, Cin, Cout) with odd kernel extents;
    b: (Cout,).
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    kd, kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv3d channel mismatch: input {x.shape[-1]} vs kernel {cin}")
    data = _conv3d_raw(x.data, w.data) + b.data

    def bw(out):
        def fn(g):
            if x.requires_grad:
                wf = w.data[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
                x._accumulate(_conv3d_raw(g, np.ascontiguousarray(wf)))
            if w.requires_grad:
                pd, ph, pw = kd // 2, kh // 2, kw // 2
                xp = np.pad(x.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))
                n, f, h, wd = x.shape[0], x.shape[1], x.shape[2], x.shape[3]
                cols = _windows3(xp, kd, kh, kw).reshape(n * f * h * wd, kd * kh * kw * cin)
                gw = cols.T @ g.reshape(-1, cout)
                w._accumulate(gw.reshape(w.shape))
            if b.requires_grad:
                b._accumulate(g.sum(axis=(0, 1, 2, 3), dtype=np.float64).astype(np.float32))

        return fn

    return _make(data, (x, w, b), bw)


# -- functional backward --------------------------------------------------------


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse pass; returns {id(tensor): grad} for requires_grad leaves."""
    loss.backward()
    grads: dict[int, np.ndarray] = {}
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.requires_grad and node._backward_fn is None and node.grad is not None:
            grads[id(node)] = node.grad
        stack.extend(node._parents)
    return grads
