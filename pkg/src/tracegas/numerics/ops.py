"""Differentiable forward kernels: elementwise math, matmul, conv2d,
bilinear resize, softmax, layer norm and reductions.

Every op validates its contract, computes the forward value with numpy and
registers a vector-Jacobian closure via :meth:`Tensor.result`.  Convolution
is realised as im2col + BLAS matmul (grouped) with a shift-and-add fast path
for depthwise kernels; bilinear resize is realised as a pair of interpolation
matrices so its transpose is again a matmul.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import GeometryError, NumericError, ShapeError
from .tensor import Tensor, as_tensor
from . import _kernels

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce_pair(a, b) -> Tuple[Tensor, Tensor]:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def constant(data, dtype=np.float32) -> Tensor:
    """Non-differentiable tensor wrapping ``data``."""
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e
    return Tensor.result(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e
    return Tensor.result(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e
    ad, bd = a.data, b.data
    return Tensor.result(out, (a, b), lambda g: (
        _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from e
    ad, bd = a.data, b.data
    return Tensor.result(out, (a, b), lambda g: (
        _unbroadcast(g / bd, a.shape),
        _unbroadcast(-g * ad / (bd * bd), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.result(-a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (no broadcasting bookkeeping needed)."""
    a = as_tensor(a)
    s = a.dtype.type(s)
    return Tensor.result(a.data * s, (a,), lambda g: (g * s,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,),
                         lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    if _kernels.HAVE_NUMBA and x.flags.c_contiguous:
        out = np.empty_like(x)
        _kernels.gelu_fwd(x, out)

        def vjp(g):
            dx = np.empty_like(x)
            _kernels.gelu_bwd(x, np.ascontiguousarray(g), dx)
            return (dx,)

        return Tensor.result(out, (a,), vjp)

    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(a.dtype)

    def vjp_np(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return Tensor.result(out, (a,), vjp_np)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in overflow-safe form; gradient is sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return Tensor.result(out.astype(a.dtype), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(a.dtype, copy=False) * np.ones(1, a.dtype),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, in_shape) * np.ones(1, a.dtype),)

    return Tensor.result(np.asarray(out, dtype=a.dtype), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    inv = a.dtype.type(1.0 / count)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g * inv, in_shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk * inv, in_shape).copy(),)

    return Tensor.result(np.asarray(out, dtype=a.dtype), (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    in_shape = a.shape
    return Tensor.result(out, (a,), lambda g: (g.reshape(in_shape),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.result(np.transpose(a.data, axes), (a,),
                         lambda g: (np.transpose(g, inv),))


def swap_last2(a) -> Tensor:
    """Transpose the trailing two dimensions (matrix transpose)."""
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``a[..., start:start+length, ...]`` along ``axis``."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of bounds for axis {axis} "
            f"of {a.shape}")
    slicer = [slice(None)] * a.ndim
    slicer[axis] = slice(start, start + length)
    out = a.data[tuple(slicer)]
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[tuple(slicer)] = g
        return (full,)

    return Tensor.result(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        parts = []
        for i in range(len(sizes)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            parts.append(g[tuple(slicer)])
        return tuple(parts)

    return Tensor.result(out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# matmul / softmax / layer norm
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with broadcastable batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return (ga, gb)

    return Tensor.result(out, (a, b), vjp)


def softmax_lastdim(a) -> Tensor:
    """Shift-invariant softmax over the trailing dimension."""
    a = as_tensor(a)
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax received NaN input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor.result(out.astype(a.dtype, copy=False), (a,), vjp)


def logsumexp_lastdim(a) -> Tensor:
    """log(sum(exp(x))) over the trailing dimension, keepdims dropped."""
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s

    def vjp(g):
        return (g[..., None] * soft,)

    return Tensor.result(out.astype(a.dtype, copy=False), (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the trailing (channel) dimension to zero mean, unit variance,
    then apply the learnable affine ``gamma * x_hat + beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    c = x.shape[-1]
    gshape, bshape = gamma.shape, beta.shape

    def vjp(g):
        gxh = g * gamma.data
        dx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        dgamma = _unbroadcast(g * xhat, gshape)
        dbeta = _unbroadcast(g, bshape)
        return (dx, dgamma, dbeta)

    return Tensor.result(out.astype(a.dtype, copy=False), (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided [B, C, ho, wo, k, k] view into the padded input."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-d cross-correlation.

    x: [B, Cin, H, W]; w: [Cout, Cin/groups, k, k]; bias: [Cout] or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    batch, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels, got {w.shape}")
    k = kh
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight {w.shape} inconsistent with Cin={cin}, groups={groups}")
    ho = _conv_out_size(h, k, stride, pad)
    wo = _conv_out_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise GeometryError(
            f"conv2d: non-positive output {ho}x{wo} for input {h}x{wd}, k={k}, "
            f"stride={stride}, pad={pad}")
    b = as_tensor(bias) if bias is not None else None
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data

    if k == 1 and stride == 1 and pad == 0 and groups == 1:
        return _conv2d_pointwise(x, w, b)
    if groups == cin and cout == cin:
        return _conv2d_depthwise(x, xp, w, b, stride, pad, ho, wo)
    return _conv2d_grouped(x, xp, w, b, stride, pad, groups, ho, wo)


def _conv2d_pointwise(x, w, b) -> Tensor:
    """1x1/stride-1 convolution as a channel matmul (no im2col)."""
    batch, cin, h, wd = x.shape
    cout = w.shape[0]
    flat = x.data.reshape(batch, cin, h * wd)
    wmat = w.data.reshape(cout, cin)
    out = np.matmul(wmat[None], flat).reshape(batch, cout, h, wd)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    need_x, need_w = x.requires_grad, w.requires_grad

    def vjp(g):
        gf = g.reshape(batch, cout, h * wd)
        dw = dx = None
        if need_w:
            dw = np.matmul(gf, flat.swapaxes(-1, -2)).sum(axis=0).reshape(w.shape)
        if need_x:
            dx = np.matmul(wmat.T[None], gf).reshape(x.shape)
        db = None if b is None else g.sum(axis=(0, 2, 3)).reshape(b.shape)
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.result(out, parents, vjp)


def _conv2d_grouped(x, xp, w, b, stride, pad, groups, ho, wo) -> Tensor:
    batch, cin, h, wd = x.shape
    cout = w.shape[0]
    k = w.shape[-1]
    cg = cin // groups
    og = cout // groups
    win = _windows(xp, k, stride, ho, wo)                    # [B,Cin,ho,wo,k,k]
    win = win.reshape(batch, groups, cg, ho, wo, k, k)
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 5, 6, 3, 4))
    col = col.reshape(batch, groups, cg * k * k, ho * wo)    # [B,g,K,L]
    wmat = w.data.reshape(groups, og, cg * k * k)            # [g,Og,K]
    out = np.matmul(wmat, col)                               # [B,g,Og,L]
    out = out.reshape(batch, cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    hp, wp = xp.shape[2], xp.shape[3]
    need_x, need_w = x.requires_grad, w.requires_grad
    # with stride 1 and few output channels, d(input) is cheaper as a
    # correlation of the output grad with the flipped kernel
    transpose_dx = (stride == 1 and groups == 1 and cout * k * k <= 160)

    def vjp(g):
        go = g.reshape(batch, groups, og, ho * wo)
        dw = dx = None
        if need_w:
            dw = np.matmul(go, col.swapaxes(-1, -2)).sum(axis=0)       # [g,Og,K]
            dw = dw.reshape(w.shape)
        if need_x:
            if transpose_dx:
                wt = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))    # [Cin,Cout,k,k]
                gp = np.pad(g, ((0, 0), (0, 0), (k - 1 - pad, k - 1 - pad),
                                (k - 1 - pad, k - 1 - pad)))
                gwin = _windows(gp, k, 1, h, wd)
                gcol = np.ascontiguousarray(
                    gwin.transpose(0, 1, 4, 5, 2, 3)).reshape(
                        batch, 1, cout * k * k, h * wd)
                dx = np.matmul(wt.reshape(1, cin, cout * k * k), gcol)
                dx = dx.reshape(batch, cin, h, wd)
            else:
                dcol = np.matmul(wmat.swapaxes(-1, -2)[None], go)      # [B,g,K,L]
                dcol = dcol.reshape(batch, groups, cg, k, k, ho, wo)
                dcol = dcol.reshape(batch, cin, k, k, ho, wo)
                dxp = np.zeros((batch, cin, hp, wp), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                            j:j + stride * (wo - 1) + 1:stride] += dcol[:, :, i, j]
                dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        db = None if b is None else g.sum(axis=(0, 2, 3)).reshape(b.shape)
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.result(out, parents, vjp)


def _conv2d_depthwise(x, xp, w, b, stride, pad, ho, wo) -> Tensor:
    """Fused scalar-loop depthwise path (numba), shift-and-add fallback."""
    batch, cin, h, wd = x.shape
    k = w.shape[-1]
    hp, wp = xp.shape[2], xp.shape[3]
    need_x, need_w = x.requires_grad, w.requires_grad
    wk = w.data[:, 0]                                        # [C,k,k]

    if _kernels.HAVE_NUMBA:
        xpc = np.ascontiguousarray(xp)
        out = np.empty((batch, cin, ho, wo), dtype=x.dtype)
        _kernels.depthwise_fwd(xpc, wk, out, stride)
        if b is not None:
            out += b.data.reshape(1, cin, 1, 1)

        def vjp(g):
            dwk = np.zeros_like(wk)
            dxp = np.zeros((batch, cin, hp, wp), dtype=x.dtype)
            _kernels.depthwise_bwd(xpc, wk, np.ascontiguousarray(g), dwk, dxp,
                                   stride, need_w, need_x)
            dw = dwk.reshape(w.shape) if need_w else None
            dx = None
            if need_x:
                dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
            db = None if b is None else g.sum(axis=(0, 2, 3)).reshape(b.shape)
            return (dx, dw, db) if b is not None else (dx, dw)

        parents = (x, w, b) if b is not None else (x, w)
        return Tensor.result(out, parents, vjp)

    out = np.zeros((batch, cin, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            xs = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride]
            out += xs * wk[:, i, j][None, :, None, None]
    if b is not None:
        out = out + b.data.reshape(1, cin, 1, 1)

    def vjp_np(g):
        dw = dx = None
        buf = np.empty((batch, cin, ho, wo), dtype=x.dtype)
        if need_w:
            dw = np.zeros_like(w.data)
        if need_x:
            dxp = np.zeros((batch, cin, hp, wp), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                if need_w:
                    xs = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                            j:j + stride * (wo - 1) + 1:stride]
                    np.multiply(g, xs, out=buf)
                    dw[:, 0, i, j] = buf.sum(axis=(0, 2, 3))
                if need_x:
                    np.multiply(g, wk[:, i, j][None, :, None, None], out=buf)
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += buf
        if need_x:
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        db = None if b is None else g.sum(axis=(0, 2, 3)).reshape(b.shape)
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.result(out, parents, vjp_np)


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic 1-d bilinear interpolation matrix (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale_f = n_in / n_out
    for d in range(n_out):
        src = (d + 0.5) * scale_f - 0.5
        i0 = int(np.floor(src))
        f = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[d, lo] += 1.0 - f
        m[d, hi] += f
    return m.astype(dtype)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resize [B, C, H, W] to [B, C, out_h, out_w] (align_corners=False)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [B,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: invalid target {out_h}x{out_w}")
    batch, c, h, w = x.shape
    if out_h == h and out_w == w:
        return Tensor.result(x.data, (x,), lambda g: (g,))
    rh = _interp_matrix(h, out_h, x.dtype)                    # [H',H]
    rw = _interp_matrix(w, out_w, x.dtype)                    # [W',W]
    flat = x.data.reshape(batch * c, h, w)
    out = np.matmul(np.matmul(rh[None], flat), rw.T[None])    # [BC,H',W']
    out = out.reshape(batch, c, out_h, out_w)

    def vjp(g):
        gf = g.reshape(batch * c, out_h, out_w)
        dx = np.matmul(np.matmul(rh.T[None], gf), rw[None])
        return (dx.reshape(batch, c, h, w),)

    return Tensor.result(out, (x,), vjp)
