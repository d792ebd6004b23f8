# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels. Mirrors ``_kernels_py`` one to one."""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] xp, real[:, :, ::1] cols, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t wp = xp.shape[3]
    cdef Py_ssize_t ho = (xp.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t s, ch, i, j, y, x, row, base
    with nogil:
        for s in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                cols[s, row, base + x] = xp[s, ch, y * stride + i, x * stride + j]


def _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int stride):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = (out.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wo = (out.shape[3] - kw) // stride + 1
    cdef Py_ssize_t s, ch, i, j, y, x, row, base
    with nogil:
        for s in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                out[s, ch, y * stride + i, x * stride + j] += cols[s, row, base + x]


def _sparse_conv(const real[:, :, :, ::1] xp, const real[:, :, :, :, ::1] weight,
                 real[:, :, :, ::1] out, int stride, int groups):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t cout = weight.shape[1], cg = weight.shape[2]
    cdef Py_ssize_t kh = weight.shape[3], kw = weight.shape[4]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t cout_g = cout // groups
    cdef Py_ssize_t s, o, ch, i, j, y, x, cin0
    cdef long long nnz = 0
    cdef real w
    with nogil:
        for s in range(n):
            for o in range(cout):
                cin0 = (o // cout_g) * cg
                for ch in range(cg):
                    for i in range(kh):
                        for j in range(kw):
                            w = weight[s, o, ch, i, j]
                            if w == 0:
                                continue
                            nnz += 1
                            for y in range(ho):
                                for x in range(wo):
                                    out[s, o, y, x] += w * xp[s, cin0 + ch, y * stride + i, x * stride + j]
    return nnz * ho * wo


def im2col(xp, int kh, int kw, int stride):
    xp = np.ascontiguousarray(xp)
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, stride)
    return cols


def col2im(cols, int channels, int hp, int wp, int kh, int kw, int stride):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], channels, hp, wp), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride)
    return out


def sparse_conv2d(xp, weight, bias, int stride, int groups):
    xp = np.ascontiguousarray(xp)
    weight = np.ascontiguousarray(weight, dtype=xp.dtype)
    n, c, hp, wp = xp.shape
    kh, kw = weight.shape[3], weight.shape[4]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, weight.shape[1], ho, wo), dtype=xp.dtype)
    if bias is not None:
        out += np.asarray(bias, dtype=xp.dtype)[:, :, None, None]
    macs = _sparse_conv(xp, weight, out, stride, groups)
    return out, int(macs)
