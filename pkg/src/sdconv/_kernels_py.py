"""Pure numpy implementations of the convolution kernels.

Used when the compiled ``_kernels`` extension is unavailable or when
``SDCONV_PURE_PYTHON=1`` is set. Signatures match the extension exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """[N, C, Hp, Wp] -> [N, C*kh*kw, Ho*Wo], rows ordered (c, i, j)."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C, Ho, Wo, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, channels, hp, wp, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back to a padded image."""
    n = cols.shape[0]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    c6 = cols.reshape(n, channels, kh, kw, ho, wo)
    out = np.zeros((n, channels, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += c6[:, :, i, j]
    return out


def sparse_conv2d(xp, weight, bias, stride, groups):
    """Per-sample convolution that only touches nonzero kernel entries.

    xp: padded input [N, C, Hp, Wp]; weight: per-sample kernels
    [N, Cout, C/groups, kh, kw]; bias: [N, Cout] or None.
    Returns (output [N, Cout, Ho, Wo], multiply-accumulate count).
    """
    n, c, hp, wp = xp.shape
    _, cout, cg, kh, kw = weight.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cout_g = cout // groups
    out = np.zeros((n, cout, ho, wo), dtype=xp.dtype)
    macs = 0
    for s in range(n):
        for o in range(cout):
            g = o // cout_g
            ci, ii, jj = np.nonzero(weight[s, o])
            acc = out[s, o]
            if bias is not None:
                acc += bias[s, o]
            for c_, i, j in zip(ci, ii, jj):
                acc += weight[s, o, c_, i, j] * xp[s, g * cg + c_, i:i + stride * ho:stride,
                                                   j:j + stride * wo:stride]
            macs += len(ci) * ho * wo
    return out, macs
