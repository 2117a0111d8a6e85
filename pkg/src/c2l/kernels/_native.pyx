# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels (3x3 conv, 2x2 max pool).

Single-threaded on purpose: reproducibility is the binding contract and
process-level parallelism lives above this layer.  Stride-1 paths use
row-local accumulators so the inner loops stay unit-stride and
vectorizable; stride-2 falls back to plain loops.
"""

import numpy as np

cimport numpy as cnp
from libc.stdlib cimport free, malloc
from libc.string cimport memset

cnp.import_array()

NAME = "native"

ctypedef fused real:
    float
    double


def _pad(x, int padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, int stride, int padding):
    b, c, h, width = x.shape
    o = w.shape[0]
    ho = (h + 2 * padding - 3) // stride + 1
    wo = (width + 2 * padding - 3) // stride + 1
    out = np.zeros((b, o, ho, wo), dtype=x.dtype)
    xp = _pad(x, padding)
    wc = np.ascontiguousarray(w)
    if x.dtype == np.float32:
        _conv2d_forward[float](xp, wc, out, stride)
    else:
        _conv2d_forward[double](xp, wc, out, stride)
    return out


cdef void _conv2d_forward(real[:, :, :, ::1] xp, real[:, :, :, ::1] w,
                          real[:, :, :, ::1] out, int stride) noexcept nogil:
    cdef Py_ssize_t b = out.shape[0], o = out.shape[1]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t bi, oi, ci, i, oy, ox
    cdef real w0, w1, w2
    cdef real* acc
    cdef real* xrow
    cdef real* orow
    acc = <real*> malloc(wo * sizeof(real))
    if acc == NULL:
        return
    for bi in range(b):
        for oi in range(o):
            for oy in range(ho):
                memset(acc, 0, wo * sizeof(real))
                for ci in range(c):
                    for i in range(3):
                        xrow = &xp[bi, ci, oy * stride + i, 0]
                        w0 = w[oi, ci, i, 0]
                        w1 = w[oi, ci, i, 1]
                        w2 = w[oi, ci, i, 2]
                        if stride == 1:
                            for ox in range(wo):
                                acc[ox] += (w0 * xrow[ox] + w1 * xrow[ox + 1]
                                            + w2 * xrow[ox + 2])
                        else:
                            for ox in range(wo):
                                acc[ox] += (w0 * xrow[2 * ox] + w1 * xrow[2 * ox + 1]
                                            + w2 * xrow[2 * ox + 2])
                orow = &out[bi, oi, oy, 0]
                for ox in range(wo):
                    orow[ox] = acc[ox]
    free(acc)


def conv2d_backward_input(gout, w, int stride, int padding, int h, int width):
    b = gout.shape[0]
    c = w.shape[1]
    gxp = np.zeros((b, c, h + 2 * padding, width + 2 * padding), dtype=gout.dtype)
    gc = np.ascontiguousarray(gout)
    wc = np.ascontiguousarray(w)
    if gxp.dtype == np.float32:
        _conv2d_backward_input[float](gc, wc, gxp, stride)
    else:
        _conv2d_backward_input[double](gc, wc, gxp, stride)
    if padding:
        return np.ascontiguousarray(
            gxp[:, :, padding : padding + h, padding : padding + width])
    return gxp


cdef void _conv2d_backward_input(real[:, :, :, ::1] gout, real[:, :, :, ::1] w,
                                 real[:, :, :, ::1] gxp, int stride) noexcept nogil:
    cdef Py_ssize_t b = gout.shape[0], o = gout.shape[1]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t c = gxp.shape[1], hp = gxp.shape[2], wp = gxp.shape[3]
    cdef Py_ssize_t bi, oi, ci, i, j, oy, ox, y
    cdef real wv
    cdef real* grow
    cdef real* xrow
    cdef real* acc
    if stride == 1:
        # per padded-input row: gather all taps into an L1 accumulator row
        acc = <real*> malloc(wp * sizeof(real))
        if acc == NULL:
            return
        for bi in range(b):
            for ci in range(c):
                for y in range(hp):
                    memset(acc, 0, wp * sizeof(real))
                    for oi in range(o):
                        for i in range(3):
                            oy = y - i
                            if oy < 0 or oy >= ho:
                                continue
                            grow = &gout[bi, oi, oy, 0]
                            for j in range(3):
                                wv = w[oi, ci, i, j]
                                for ox in range(wo):
                                    acc[ox + j] += wv * grow[ox]
                    xrow = &gxp[bi, ci, y, 0]
                    for ox in range(wp):
                        xrow[ox] = acc[ox]
        free(acc)
        return
    for bi in range(b):
        for oi in range(o):
            for ci in range(c):
                for oy in range(ho):
                    grow = &gout[bi, oi, oy, 0]
                    for i in range(3):
                        xrow = &gxp[bi, ci, oy * stride + i, 0]
                        for j in range(3):
                            wv = w[oi, ci, i, j]
                            for ox in range(wo):
                                xrow[2 * ox + j] += wv * grow[ox]


def conv2d_backward_kernel(gout, x, int stride, int padding):
    o = gout.shape[1]
    c = x.shape[1]
    gw = np.zeros((o, c, 3, 3), dtype=gout.dtype)
    gc = np.ascontiguousarray(gout)
    xp = _pad(x, padding)
    if gw.dtype == np.float32:
        _conv2d_backward_kernel[float](gc, xp, gw, stride)
    else:
        _conv2d_backward_kernel[double](gc, xp, gw, stride)
    return gw


cdef void _conv2d_backward_kernel(real[:, :, :, ::1] gout, real[:, :, :, ::1] xp,
                                  real[:, :, :, ::1] gw, int stride) noexcept nogil:
    cdef Py_ssize_t b = gout.shape[0], o = gout.shape[1]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t bi, oi, ci, i, oy, ox
    cdef real a0, a1, a2, g
    cdef real* grow
    cdef real* xrow
    cdef real* acc
    # elementwise accumulator rows keep the inner loop vectorizable; the
    # final reduction over wo elements is negligible
    acc = <real*> malloc(3 * wo * sizeof(real))
    if acc == NULL:
        return
    for oi in range(o):
        for ci in range(c):
            for i in range(3):
                memset(acc, 0, 3 * wo * sizeof(real))
                for bi in range(b):
                    for oy in range(ho):
                        grow = &gout[bi, oi, oy, 0]
                        xrow = &xp[bi, ci, oy * stride + i, 0]
                        if stride == 1:
                            for ox in range(wo):
                                g = grow[ox]
                                acc[ox] += g * xrow[ox]
                                acc[wo + ox] += g * xrow[ox + 1]
                                acc[2 * wo + ox] += g * xrow[ox + 2]
                        else:
                            for ox in range(wo):
                                g = grow[ox]
                                acc[ox] += g * xrow[2 * ox]
                                acc[wo + ox] += g * xrow[2 * ox + 1]
                                acc[2 * wo + ox] += g * xrow[2 * ox + 2]
                a0 = 0
                a1 = 0
                a2 = 0
                for ox in range(wo):
                    a0 += acc[ox]
                    a1 += acc[wo + ox]
                    a2 += acc[2 * wo + ox]
                gw[oi, ci, i, 0] = a0
                gw[oi, ci, i, 1] = a1
                gw[oi, ci, i, 2] = a2
    free(acc)


def maxpool2x2_forward(x):
    b, c, h, w = x.shape
    out = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((b, c, h // 2, w // 2), dtype=np.uint8)
    xc = np.ascontiguousarray(x)
    if x.dtype == np.float32:
        _maxpool2x2_forward[float](xc, out, idx)
    else:
        _maxpool2x2_forward[double](xc, out, idx)
    return out, idx


cdef void _maxpool2x2_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                              cnp.uint8_t[:, :, :, ::1] idx) noexcept nogil:
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t h2 = out.shape[2], w2 = out.shape[3]
    cdef Py_ssize_t bi, ci, oy, ox
    cdef real v0, v1, v2, v3, best
    cdef int k
    for bi in range(b):
        for ci in range(c):
            for oy in range(h2):
                for ox in range(w2):
                    v0 = x[bi, ci, 2 * oy, 2 * ox]
                    v1 = x[bi, ci, 2 * oy, 2 * ox + 1]
                    v2 = x[bi, ci, 2 * oy + 1, 2 * ox]
                    v3 = x[bi, ci, 2 * oy + 1, 2 * ox + 1]
                    best = v0
                    k = 0
                    if v1 > best:
                        best = v1
                        k = 1
                    if v2 > best:
                        best = v2
                        k = 2
                    if v3 > best:
                        best = v3
                        k = 3
                    out[bi, ci, oy, ox] = best
                    idx[bi, ci, oy, ox] = <cnp.uint8_t> k


def maxpool2x2_backward(gout, idx):
    b, c, h2, w2 = gout.shape
    gx = np.zeros((b, c, 2 * h2, 2 * w2), dtype=gout.dtype)
    gc = np.ascontiguousarray(gout)
    ic = np.ascontiguousarray(idx)
    if gx.dtype == np.float32:
        _maxpool2x2_backward[float](gc, ic, gx)
    else:
        _maxpool2x2_backward[double](gc, ic, gx)
    return gx


cdef void _maxpool2x2_backward(real[:, :, :, ::1] gout,
                               cnp.uint8_t[:, :, :, ::1] idx,
                               real[:, :, :, ::1] gx) noexcept nogil:
    cdef Py_ssize_t b = gout.shape[0], c = gout.shape[1]
    cdef Py_ssize_t h2 = gout.shape[2], w2 = gout.shape[3]
    cdef Py_ssize_t bi, ci, oy, ox
    cdef int k
    for bi in range(b):
        for ci in range(c):
            for oy in range(h2):
                for ox in range(w2):
                    k = idx[bi, ci, oy, ox]
                    gx[bi, ci, 2 * oy + (k >> 1), 2 * ox + (k & 1)] = \
                        gout[bi, ci, oy, ox]
