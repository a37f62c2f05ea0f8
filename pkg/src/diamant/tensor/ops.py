"""Differentiable primitives.

Every op takes :class:`Tensor` inputs, computes the forward value with
numpy, and registers a backward rule through :func:`make_result`.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ..exceptions import DomainError, ShapeError
from .core import Tensor, make_result

LOG_CLAMP = 1e-12


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str):
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out_shape != a.shape:
        raise ShapeError(f"{op}: {b.shape} must broadcast onto {a.shape}")


# ---------------------------------------------------------------- elementwise

def _coerce_pair(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a, b = b, a
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if _broadcastable(a, b) and np.broadcast_shapes(a.shape, b.shape) != a.shape:
        a, b = b, a
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def _broadcastable(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
        return True
    except ValueError:
        return False


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "sub")
    sb = b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_binary(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return make_result(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, sb)))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "div")
    ad, bd, sb = a.data, b.data, b.shape
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, _unbroadcast(-g * out / bd, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c) if a.data.dtype.kind == "f" else c
    return make_result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN, so a diverged forward pass stays visible
    return make_result(np.maximum(a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor, clamp: float | None = None) -> Tensor:
    """Natural log.  Without ``clamp`` any input <= 0 is a domain error;
    with it, inputs are floored at ``clamp`` and get zero gradient there."""
    x = a.data
    if clamp is None:
        if np.any(x <= 0):
            raise DomainError("log of a non-positive value; pass clamp= to floor inputs")
        return make_result(np.log(x), (a,), lambda g: (g / x,))
    floor = x.dtype.type(clamp)
    safe = np.maximum(x, floor)
    live = x > floor
    return make_result(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0).astype(x.dtype),))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * x.dtype.type(_SQRT_HALF)))
    out = (x * cdf).astype(x.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x * pdf)).astype(x.dtype),

    return make_result(out, (a,), bw)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "log": log, "exp": exp, "gelu": gelu,
}


def elementwise(op_kind: str, a: Tensor, b=None, **kw) -> Tensor:
    """Dispatch by name; ``scale`` takes the factor as ``b``."""
    if op_kind == "scale":
        return scale(a, b)
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul", "div"):
        return fn(a, b)
    return fn(a, **kw)


# ---------------------------------------------------------------- reductions, shape

def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(1)
        return make_result(out, (a,), lambda g: (np.broadcast_to(g.reshape(()), shape),))
    out = a.data.sum(axis=axis, keepdims=True)

    def bw(g):
        return (np.broadcast_to(g.reshape(out.shape), shape),)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return make_result(res, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return make_result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


# ---------------------------------------------------------------- matmul, softmax

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contraction over the last axis of ``a`` and the second-to-last of ``b``.

    ``b`` may be 2-D (shared across ``a``'s leading dims); otherwise the
    leading batch dims of both operands must match.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, _unbroadcast(gb, sb)

    return make_result(ad @ bd, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    if not np.all(np.isfinite(d)):
        raise DomainError("softmax input contains non-finite values")
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw)


# ---------------------------------------------------------------- convolution

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv output size ({n}+2*{pad}-{k})/{stride}+1 is not integral")
    return span // stride + 1


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add ``cols`` (B, Ho, Wo, C, k, k) back into a (B, C, H, W) image."""
    B, C, H, W = shape
    _, Ho, Wo = cols.shape[:3]
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> strided view (B, C, Ho, Wo, k, k)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, weights (Cout, Cin, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if Cin != C or kh != kw:
        raise ShapeError(f"conv2d weight {w.shape} does not match input channels {C}")
    k = kh
    Ho = conv_output_size(H, k, stride, pad)
    Wo = conv_output_size(W, k, stride, pad)
    xd, wd = x.data, w.data
    if k == 1 and stride == 1 and pad == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, C)
        wmat = wd.reshape(Cout, C)
    else:
        cols = _im2col(xd, k, stride, pad).transpose(0, 2, 3, 1, 4, 5).reshape(-1, C * k * k)
        wmat = wd.reshape(Cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = g2 @ wmat
        if k == 1 and stride == 1 and pad == 0:
            gx = gcols.reshape(B, H, W, C).transpose(0, 3, 1, 2)
        else:
            gx = _col2im(gcols.reshape(B, Ho, Wo, C, k, k), (B, C, H, W), k, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 0) -> Tensor:
    """Transposed convolution, weights (Cin, Cout, k, k).

    Without bias this is the exact adjoint of :func:`conv2d` with the same
    weight array, stride and padding.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D x and w, got {x.shape}, {w.shape}")
    if stride < 1:
        raise ShapeError("conv_transpose2d stride must be >= 1")
    B, C, H, W = x.shape
    Cin, Cout, k, kw = w.shape
    if Cin != C or k != kw:
        raise ShapeError(f"conv_transpose2d weight {w.shape} does not match input channels {C}")
    Ho = (H - 1) * stride - 2 * pad + k
    Wo = (W - 1) * stride - 2 * pad + k
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv_transpose2d output would be empty")
    xd, wd = x.data, w.data
    x2 = xd.transpose(0, 2, 3, 1).reshape(-1, C)
    wmat = wd.reshape(C, Cout * k * k)
    if stride == k and pad == 0:
        # non-overlapping windows: a pure reshape instead of a scatter
        cols = (x2 @ wmat).reshape(B, H, W, Cout, k, k)
        out = cols.transpose(0, 3, 1, 4, 2, 5).reshape(B, Cout, Ho, Wo)
    else:
        cols = (x2 @ wmat).reshape(B, H, W, Cout, k, k)
        out = _col2im(cols, (B, Cout, Ho, Wo), k, stride, pad)
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1, 1)
    out = np.ascontiguousarray(out)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        if stride == k and pad == 0:
            gcols = g.reshape(B, Cout, H, k, W, k).transpose(0, 2, 4, 1, 3, 5).reshape(-1, Cout * k * k)
        else:
            gcols = _im2col(g, k, stride, pad).transpose(0, 2, 3, 1, 4, 5).reshape(-1, Cout * k * k)
        gx = (gcols @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        gw = (x2.T @ gcols).reshape(wd.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bw)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling.  Gradient goes to the first maximal
    element of each window in row-major order."""
    if k != stride:
        raise ShapeError("maxpool2d supports only k == stride")
    B, C, H, W = x.shape
    if H % stride or W % stride:
        raise ShapeError(f"maxpool2d: spatial dims {(H, W)} not divisible by {stride}")
    Ho, Wo = H // k, W // k
    win = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------- resampling

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel (align_corners=False) centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear expects (B, C, H, W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize target must be at least 1x1")
    _, _, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x
    ry = bilinear_matrix(H, out_h, x.data.dtype)
    rx = bilinear_matrix(W, out_w, x.data.dtype)
    out = ry @ x.data @ rx.T
    return make_result(out, (x,), lambda g: (ry.T @ g @ rx,))


# ---------------------------------------------------------------- normalisation

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalisation over (B, H, W).

    Returns ``(out, new_running_mean, new_running_var)``; the running
    statistics are returned rather than mutated.  The running variance uses
    the unbiased batch estimate.
    """
    d = x.data
    dt = d.dtype.type
    C = d.shape[1]
    shp = (1, C, 1, 1)
    g = gamma.data.reshape(shp)
    if not train:
        inv = 1.0 / np.sqrt(running_var.reshape(shp) + dt(eps))
        xhat = (d - running_mean.reshape(shp)) * inv
        out = xhat * g + beta.data.reshape(shp)

        def bw_eval(go):
            return (go * g * inv, (go * xhat).sum(axis=(0, 2, 3)), go.sum(axis=(0, 2, 3)))

        return make_result(out, (x, gamma, beta), bw_eval), running_mean, running_var

    n = d.shape[0] * d.shape[2] * d.shape[3]
    mu = d.mean(axis=(0, 2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + dt(eps))
    xhat = xc * inv
    out = xhat * g + beta.data.reshape(shp)

    def bw(go):
        dxhat = go * g
        gx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, (go * xhat).sum(axis=(0, 2, 3)), go.sum(axis=(0, 2, 3))

    m = dt(momentum)
    unbiased = var.reshape(C) * dt(n / max(n - 1, 1))
    new_mean = (1 - m) * running_mean + m * mu.reshape(C)
    new_var = (1 - m) * running_var + m * unbiased
    return make_result(out, (x, gamma, beta), bw), new_mean.astype(d.dtype), new_var.astype(d.dtype)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(d.ndim - 1))

    def bw(go):
        dxhat = go * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (go * xhat).sum(axis=lead), go.sum(axis=lead)

    return make_result(out, (x, gamma, beta), bw)
