"""Numpy implementations of the hot kernels.

Always available; the compiled backend is tested against these.  The
convolution routes through an explicit patch matrix laid out [C*9, B*Ho*Wo]
(built from per-tap plane copies, which numpy does at memcpy speed) so
each direction is a single GEMM.
"""

import numpy as np

NAME = "numpy"


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _tap_view(xp, i, j, ho, wo, stride):
    """The [B,C,Ho,Wo] window of padded input seen by kernel tap (i, j)."""
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
              j : j + stride * (wo - 1) + 1 : stride]


def _im2col(xp, ho, wo, stride):
    """Padded input [B,C,Hp,Wp] -> patch matrix [C*9, B*Ho*Wo]."""
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * 9, b * ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for i in range(3):
            for j in range(3):
                row = cols[(ci * 3 + i) * 3 + j].reshape(b, ho, wo)
                np.copyto(row, _tap_view(xp, i, j, ho, wo, stride)[:, ci])
    return cols


def conv2d_forward(x, w, stride, padding):
    """Cross-correlate x[B,C,H,W] with w[O,C,3,3] -> [B,O,Ho,Wo]."""
    b, c, h, width = x.shape
    o = w.shape[0]
    ho = (h + 2 * padding - 3) // stride + 1
    wo = (width + 2 * padding - 3) // stride + 1
    cols = _im2col(_pad(x, padding), ho, wo, stride)
    out = w.reshape(o, c * 9) @ cols  # [O, B*Ho*Wo]
    return np.ascontiguousarray(
        out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3))


def conv2d_backward_input(gout, w, stride, padding, h, width):
    """Gradient of conv2d w.r.t. its input, given gout[B,O,Ho,Wo]."""
    b, o, ho, wo = gout.shape
    c = w.shape[1]
    g2d = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(o, -1)
    gcols = w.reshape(o, c * 9).T @ g2d  # [C*9, B*Ho*Wo]
    gxp = np.zeros((b, c, h + 2 * padding, width + 2 * padding), dtype=gout.dtype)
    for ci in range(c):
        for i in range(3):
            for j in range(3):
                _tap_view(gxp, i, j, ho, wo, stride)[:, ci] += \
                    gcols[(ci * 3 + i) * 3 + j].reshape(b, ho, wo)
    if padding:
        return np.ascontiguousarray(
            gxp[:, :, padding : padding + h, padding : padding + width])
    return gxp


def conv2d_backward_kernel(gout, x, stride, padding):
    """Gradient of conv2d w.r.t. the kernel."""
    b, o, ho, wo = gout.shape
    c = x.shape[1]
    cols = _im2col(_pad(x, padding), ho, wo, stride)
    g2d = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(o, -1)
    return (g2d @ cols.T).reshape(o, c, 3, 3)


def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2.  Returns (out, argmax in 0..3).

    Ties resolve to the first window position in row-major order, matching
    the compiled backend.
    """
    b, c, h, w = x.shape
    v = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = np.ascontiguousarray(v).reshape(b, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=4).astype(np.uint8)
    out = np.take_along_axis(v, idx[..., None].astype(np.intp), axis=4)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(gout, idx):
    """Scatter gout back to the argmax positions."""
    b, c, h2, w2 = gout.shape
    gv = np.zeros((b, c, h2, w2, 4), dtype=gout.dtype)
    np.put_along_axis(gv, idx[..., None].astype(np.intp), gout[..., None], axis=4)
    gx = gv.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx).reshape(b, c, 2 * h2, 2 * w2)
