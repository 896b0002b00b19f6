# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: convolution lowering and max pooling.

Same contracts as ralab._kernels.reference; ties in maxpool resolve to the
first (row-major) position, matching numpy argmax.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def conv_out_size(Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t sh, Py_ssize_t sw):
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def im2col(const floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // sh + 1, ow = (w - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef floating[:, ::1] cols = out_arr
    cdef Py_ssize_t b, ci, oy, ox, i, j, row, col
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            col = (ci * kh + i) * kw + j
                            cols[row, col] = x[b, ci, oy * sh + i, ox * sw + j]
    return out_arr


def col2im(const floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh,
           Py_ssize_t sw):
    cdef Py_ssize_t oh = (h - kh) // sh + 1, ow = (w - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, oy, ox, i, j, row, col
    # kernel offsets outermost: same accumulation order as the numpy
    # reference, so both backends agree bit-for-bit
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ci in range(c):
                    col = (ci * kh + i) * kw + j
                    for oy in range(oh):
                        for ox in range(ow):
                            row = (b * oh + oy) * ow + ox
                            out[b, ci, oy * sh + i, ox * sw + j] += cols[row, col]
    return out_arr


def maxpool_forward(const floating[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t s):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // s + 1, ow = (w - k) // s + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ci, oy, ox, i, j, br, bc
    cdef floating best, v
    cdef Py_ssize_t besti
    for b in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    br = oy * s
                    bc = ox * s
                    best = x[b, ci, br, bc]
                    besti = br * w + bc
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ci, br + i, bc + j]
                            if v > best:
                                best = v
                                besti = (br + i) * w + (bc + j)
                    out[b, ci, oy, ox] = best
                    arg[b, ci, oy, ox] = besti
    return out_arr, arg_arr


def maxpool_backward(const floating[:, :, :, ::1] grad_out,
                     const cnp.int64_t[:, :, :, ::1] argmax,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, oy, ox, pos
    for b in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    pos = argmax[b, ci, oy, ox]
                    out[b, ci, pos // w, pos % w] += grad_out[b, ci, oy, ox]
    return out_arr
