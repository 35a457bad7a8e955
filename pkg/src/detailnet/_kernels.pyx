# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics mirror ``_fallback`` exactly, including
the per-element accumulation order, so both backends agree bitwise."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int dilation,
           int pad_h, int pad_w, int oh, int ow):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t k = channels * kh * kw
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((n_batch * oh * ow, k), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, i, j, ki, kj, row, col
    cdef Py_ssize_t y, xx
    with nogil:
        for n in range(n_batch):
            for i in range(oh):
                for j in range(ow):
                    row = (n * oh + i) * ow + j
                    col = 0
                    for c in range(channels):
                        for ki in range(kh):
                            y = i * stride - pad_h + ki * dilation
                            for kj in range(kw):
                                xx = j * stride - pad_w + kj * dilation
                                if 0 <= y < height and 0 <= xx < width:
                                    cols[row, col] = x[n, c, y, xx]
                                else:
                                    cols[row, col] = 0
                                col += 1
    return cols_arr


def col2im(real[:, ::1] cols, int n_batch, int channels, int height, int width,
           int kh, int kw, int stride, int dilation, int pad_h, int pad_w,
           int oh, int ow):
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_batch, channels, height, width), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, ki, kj, y, xx, col
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for ki in range(kh):
                    for kj in range(kw):
                        col = (c * kh + ki) * kw + kj
                        for i in range(oh):
                            y = i * stride - pad_h + ki * dilation
                            if y < 0 or y >= height:
                                continue
                            for j in range(ow):
                                xx = j * stride - pad_w + kj * dilation
                                if 0 <= xx < width:
                                    out[n, c, y, xx] += cols[(n * oh + i) * ow + j, col]
    return out_arr


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride, int pad, int oh, int ow):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n_batch, channels, oh, ow), dtype=dtype)
    arg_arr = np.empty((n_batch, channels, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, i, j, ki, kj, y, xx
    cdef cnp.int64_t best_idx
    cdef real best, v
    cdef bint found
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for i in range(oh):
                    for j in range(ow):
                        found = False
                        best = 0
                        best_idx = -1
                        for ki in range(k):
                            y = i * stride - pad + ki
                            if y < 0 or y >= height:
                                continue
                            for kj in range(k):
                                xx = j * stride - pad + kj
                                if xx < 0 or xx >= width:
                                    continue
                                v = x[n, c, y, xx]
                                if not found or v > best:
                                    best = v
                                    best_idx = y * width + xx
                                    found = True
                        out[n, c, i, j] = best
                        arg[n, c, i, j] = best_idx
    return out_arr, arg_arr


def maxpool_backward(real[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] arg,
                     int height, int width):
    cdef Py_ssize_t n_batch = grad.shape[0], channels = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_batch, channels, height * width), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for i in range(oh):
                    for j in range(ow):
                        out[n, c, arg[n, c, i, j]] += grad[n, c, i, j]
    return out_arr.reshape(n_batch, channels, height, width)


def disc_gather(double[:, :, ::1] image, double[:, ::1] radius, int max_r):
    cdef Py_ssize_t height = image.shape[0], width = image.shape[1]
    cdef Py_ssize_t channels = image.shape[2]
    out_arr = np.empty((height, width, channels), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t y, x, dy, dx, c, yy, xx, ir
    cdef double r, r2, count
    cdef double acc[16]
    if channels > 16:
        raise ValueError("at most 16 channels supported")
    with nogil:
        for y in range(height):
            for x in range(width):
                r = radius[y, x]
                ir = <Py_ssize_t>floor(r)
                if ir > max_r:
                    ir = max_r
                r2 = r * r
                count = 0
                for c in range(channels):
                    acc[c] = 0
                for dy in range(-ir, ir + 1):
                    yy = y + dy
                    if yy < 0 or yy >= height:
                        continue
                    for dx in range(-ir, ir + 1):
                        xx = x + dx
                        if xx < 0 or xx >= width:
                            continue
                        if dy * dy + dx * dx > r2:
                            continue
                        for c in range(channels):
                            acc[c] += image[yy, xx, c]
                        count += 1
                for c in range(channels):
                    out[y, x, c] = acc[c] / count
    return out_arr
