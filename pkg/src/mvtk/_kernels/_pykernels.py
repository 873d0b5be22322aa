"""Pure-numpy convolution kernels.

Reference backend: always importable, and the one the native kernels are
checked against. Accumulation runs over kernel offsets in row-major
``(i, j)`` order so forward results match the native backend bit for bit.
"""

import numpy as np


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo), column order matching weight.reshape(Cout, -1)."""
    n, c, h, w = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = _pad(x, pad)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])


def dw_forward(x, w, stride, pad):
    """Depthwise conv. ``w`` is (C, kh, kw)."""
    n, c, h, wd = x.shape
    _, kh, kw = w.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(wd, kw, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += w[None, :, i, j, None, None] * xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return out


def dw_backward(gout, x, w, stride, pad):
    n, c, h, wd = x.shape
    _, kh, kw = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            win = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gxp[win] += w[None, :, i, j, None, None] * gout
            gw[:, i, j] = np.einsum("nchw,nchw->c", gout, xp[win])
    gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
    return gx, gw
