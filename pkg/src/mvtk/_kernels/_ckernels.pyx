# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Native convolution kernels; same contract as ``_pykernels``.

Loops run over kernel offsets ``(i, j)`` outermost and accumulate whole
output rows, the same order as the numpy backend, so depthwise forward
results are bit-identical for finite inputs (padded taps only ever add
zeros, which is skipped here). Inner loops cover the precomputed valid
column range and carry no bounds branches.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (n + 2 * p - k) // s + 1


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t s) nogil:
    # ceil(a / s) for s > 0 and any sign of a
    if a <= 0:
        return -((-a) // s)
    return (a + s - 1) // s


cdef inline void _valid(Py_ssize_t off, Py_ssize_t size, Py_ssize_t nout, Py_ssize_t s, Py_ssize_t pad,
                        Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # outputs o with 0 <= o*s + off - pad < size
    lo[0] = max(<Py_ssize_t>0, _ceil_div(pad - off, s))
    hi[0] = min(nout, _ceil_div(size + pad - off, s))
    if hi[0] < lo[0]:
        hi[0] = lo[0]


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = _out(h, kh, stride, pad), wo = _out(w, kw, stride, pad)
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, iy, row, lo, hi, base, off
    with nogil:
        for j in range(kw):
            _valid(j, w, wo, stride, pad, &lo, &hi)
            off = j - pad
            for b in range(n):
                for ch in range(c):
                    for i in range(kh):
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            iy = oh * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = oh * wo
                            for ow in range(lo, hi):
                                cols[b, row, base + ow] = x[b, ch, iy, ow * stride + off]
    return out


def col2im(real[:, :, ::1] cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = _out(h, kh, stride, pad), wo = _out(w, kw, stride, pad)
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, iy, row, lo, hi, base, off
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        _valid(j, w, wo, stride, pad, &lo, &hi)
                        off = j - pad
                        row = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            iy = oh * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = oh * wo
                            for ow in range(lo, hi):
                                dx[b, ch, iy, ow * stride + off] += cols[b, row, base + ow]
    return out


def dw_forward(real[:, :, :, ::1] x, real[:, :, ::1] wt, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = wt.shape[1], kw = wt.shape[2]
    cdef Py_ssize_t ho = _out(h, kh, stride, pad), wo = _out(w, kw, stride, pad)
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, iy, lo, hi, off
    cdef real wv
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        wv = wt[ch, i, j]
                        _valid(j, w, wo, stride, pad, &lo, &hi)
                        off = j - pad
                        for oh in range(ho):
                            iy = oh * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            if stride == 1:
                                for ow in range(lo, hi):
                                    y[b, ch, oh, ow] = y[b, ch, oh, ow] + wv * x[b, ch, iy, ow + off]
                            else:
                                for ow in range(lo, hi):
                                    y[b, ch, oh, ow] = y[b, ch, oh, ow] + wv * x[b, ch, iy, ow * stride + off]
    return out


def dw_backward(real[:, :, :, ::1] gout, real[:, :, :, ::1] x, real[:, :, ::1] wt, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = wt.shape[1], kw = wt.shape[2]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n, c, h, w), dtype=dtype)
    gw_arr = np.zeros((c, kh, kw), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, ch, i, j, oh, ow, iy, lo, hi, off, ix
    cdef double acc
    cdef real g, wv
    with nogil:
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = wt[ch, i, j]
                    _valid(j, w, wo, stride, pad, &lo, &hi)
                    off = j - pad
                    acc = 0
                    for b in range(n):
                        for oh in range(ho):
                            iy = oh * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ow in range(lo, hi):
                                ix = ow * stride + off
                                g = gout[b, ch, oh, ow]
                                gx[b, ch, iy, ix] += wv * g
                                acc += g * x[b, ch, iy, ix]
                    gw[ch, i, j] = <real>acc
    return gx_arr, gw_arr
