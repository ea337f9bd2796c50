"""JIT-compiled inner loops for the memory-bound kernels.

Depthwise convolution and gelu dominate step time when realised as chains of
whole-array numpy expressions; a fused scalar loop does one pass over memory.
Falls back to None (numpy paths in ops.py) when numba is unavailable.
"""
from __future__ import annotations

from math import erf, exp

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - always present in CI image
    HAVE_NUMBA = False

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

if HAVE_NUMBA:

    # 3x3 kernels carry constant trip counts so the loops unroll and vectorize;
    # the generic-k fallbacks below stay scalar.

    @njit(cache=True)
    def _dw3_fwd(xp, w, out, stride):
        bn, cn, ho, wo = out.shape
        for b in range(bn):
            for c in range(cn):
                w00, w01, w02 = w[c, 0, 0], w[c, 0, 1], w[c, 0, 2]
                w10, w11, w12 = w[c, 1, 0], w[c, 1, 1], w[c, 1, 2]
                w20, w21, w22 = w[c, 2, 0], w[c, 2, 1], w[c, 2, 2]
                for i in range(ho):
                    ii = i * stride
                    for j in range(wo):
                        jj = j * stride
                        out[b, c, i, j] = (
                            xp[b, c, ii, jj] * w00 + xp[b, c, ii, jj + 1] * w01
                            + xp[b, c, ii, jj + 2] * w02
                            + xp[b, c, ii + 1, jj] * w10
                            + xp[b, c, ii + 1, jj + 1] * w11
                            + xp[b, c, ii + 1, jj + 2] * w12
                            + xp[b, c, ii + 2, jj] * w20
                            + xp[b, c, ii + 2, jj + 1] * w21
                            + xp[b, c, ii + 2, jj + 2] * w22)

    @njit(cache=True)
    def _dw_fwd_generic(xp, w, out, stride):
        bn, cn, ho, wo = out.shape
        k = w.shape[1]
        for b in range(bn):
            for c in range(cn):
                for i in range(ho):
                    ii = i * stride
                    for j in range(wo):
                        jj = j * stride
                        acc = w[c, 0, 0] - w[c, 0, 0]
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, c, ii + u, jj + v] * w[c, u, v]
                        out[b, c, i, j] = acc

    def depthwise_fwd(xp, w, out, stride):
        if w.shape[1] == 3:
            _dw3_fwd(xp, w, out, stride)
        else:
            _dw_fwd_generic(xp, w, out, stride)

    @njit(cache=True)
    def _dw3_bwd(xp, w, g, dw, dxp, stride, need_w, need_x):
        bn, cn, ho, wo = g.shape
        for b in range(bn):
            for c in range(cn):
                if need_x:
                    w00, w01, w02 = w[c, 0, 0], w[c, 0, 1], w[c, 0, 2]
                    w10, w11, w12 = w[c, 1, 0], w[c, 1, 1], w[c, 1, 2]
                    w20, w21, w22 = w[c, 2, 0], w[c, 2, 1], w[c, 2, 2]
                    for i in range(ho):
                        ii = i * stride
                        for j in range(wo):
                            jj = j * stride
                            gv = g[b, c, i, j]
                            dxp[b, c, ii, jj] += gv * w00
                            dxp[b, c, ii, jj + 1] += gv * w01
                            dxp[b, c, ii, jj + 2] += gv * w02
                            dxp[b, c, ii + 1, jj] += gv * w10
                            dxp[b, c, ii + 1, jj + 1] += gv * w11
                            dxp[b, c, ii + 1, jj + 2] += gv * w12
                            dxp[b, c, ii + 2, jj] += gv * w20
                            dxp[b, c, ii + 2, jj + 1] += gv * w21
                            dxp[b, c, ii + 2, jj + 2] += gv * w22
                if need_w:
                    a00 = a01 = a02 = a10 = a11 = a12 = a20 = a21 = a22 = \
                        w[c, 0, 0] - w[c, 0, 0]
                    for i in range(ho):
                        ii = i * stride
                        for j in range(wo):
                            jj = j * stride
                            gv = g[b, c, i, j]
                            a00 += gv * xp[b, c, ii, jj]
                            a01 += gv * xp[b, c, ii, jj + 1]
                            a02 += gv * xp[b, c, ii, jj + 2]
                            a10 += gv * xp[b, c, ii + 1, jj]
                            a11 += gv * xp[b, c, ii + 1, jj + 1]
                            a12 += gv * xp[b, c, ii + 1, jj + 2]
                            a20 += gv * xp[b, c, ii + 2, jj]
                            a21 += gv * xp[b, c, ii + 2, jj + 1]
                            a22 += gv * xp[b, c, ii + 2, jj + 2]
                    dw[c, 0, 0] += a00
                    dw[c, 0, 1] += a01
                    dw[c, 0, 2] += a02
                    dw[c, 1, 0] += a10
                    dw[c, 1, 1] += a11
                    dw[c, 1, 2] += a12
                    dw[c, 2, 0] += a20
                    dw[c, 2, 1] += a21
                    dw[c, 2, 2] += a22

    @njit(cache=True)
    def _dw_bwd_generic(xp, w, g, dw, dxp, stride, need_w, need_x):
        bn, cn, ho, wo = g.shape
        k = w.shape[1]
        for b in range(bn):
            for c in range(cn):
                for i in range(ho):
                    ii = i * stride
                    for j in range(wo):
                        jj = j * stride
                        gv = g[b, c, i, j]
                        for u in range(k):
                            for v in range(k):
                                if need_w:
                                    dw[c, u, v] += gv * xp[b, c, ii + u, jj + v]
                                if need_x:
                                    dxp[b, c, ii + u, jj + v] += gv * w[c, u, v]

    def depthwise_bwd(xp, w, g, dw, dxp, stride, need_w, need_x):
        if w.shape[1] == 3:
            _dw3_bwd(xp, w, g, dw, dxp, stride, need_w, need_x)
        else:
            _dw_bwd_generic(xp, w, g, dw, dxp, stride, need_w, need_x)

    @njit(cache=True)
    def gelu_fwd(x, out):
        xf = x.ravel()
        of = out.ravel()
        for i in range(xf.size):
            xi = xf[i]
            of[i] = 0.5 * xi * (1.0 + erf(xi * _INV_SQRT2))

    @njit(cache=True)
    def gelu_bwd(x, g, out):
        xf = x.ravel()
        gf = g.ravel()
        of = out.ravel()
        for i in range(xf.size):
            xi = xf[i]
            cdf = 0.5 * (1.0 + erf(xi * _INV_SQRT2))
            pdf = exp(-0.5 * xi * xi) * _INV_SQRT2PI
            of[i] = gf[i] * (cdf + xi * pdf)

else:  # pragma: no cover
    depthwise_fwd = depthwise_bwd = gelu_fwd = gelu_bwd = None
