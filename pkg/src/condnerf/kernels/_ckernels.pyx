# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the per-ray and per-sample kernels.

Signatures and results match :mod:`condnerf.kernels._numpy`.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def composite_forward(real[:, ::1] sigma, real[:, :, ::1] rgb, real[:, ::1] delta):
    cdef Py_ssize_t R = sigma.shape[0], S = sigma.shape[1], r, s
    dtype = np.float32 if real is float else np.float64
    color_arr = np.zeros((R, 3), dtype=dtype)
    tfin_arr = np.empty(R, dtype=dtype)
    w_arr = np.empty((R, S), dtype=dtype)
    cdef real[:, ::1] color = color_arr
    cdef real[::1] tfin = tfin_arr
    cdef real[:, ::1] w = w_arr
    cdef real trans, keep, wi
    with nogil:
        for r in range(R):
            trans = 1
            for s in range(S):
                keep = exp(-sigma[r, s] * delta[r, s])
                wi = trans * (1 - keep)
                w[r, s] = wi
                color[r, 0] += wi * rgb[r, s, 0]
                color[r, 1] += wi * rgb[r, s, 1]
                color[r, 2] += wi * rgb[r, s, 2]
                trans = trans * keep
            tfin[r] = trans
    return color_arr, tfin_arr, w_arr


def composite_backward(real[:, ::1] sigma, real[:, :, ::1] rgb, real[:, ::1] delta,
                       real[:, ::1] weights, real[::1] t_final,
                       real[:, ::1] g_color, real[::1] g_tfinal):
    cdef Py_ssize_t R = sigma.shape[0], S = sigma.shape[1], r, s
    dtype = np.float32 if real is float else np.float64
    gs_arr = np.empty((R, S), dtype=dtype)
    grgb_arr = np.empty((R, S, 3), dtype=dtype)
    cdef real[:, ::1] gs = gs_arr
    cdef real[:, :, ::1] grgb = grgb_arr
    cdef real trans_next, gc, after, tg, g0, g1, g2
    with nogil:
        for r in range(R):
            g0 = g_color[r, 0]
            g1 = g_color[r, 1]
            g2 = g_color[r, 2]
            tg = t_final[r] * g_tfinal[r]
            after = 0
            # walk backwards so the suffix sum of w_i (g . c_i) is available
            trans_next = t_final[r]
            for s in range(S - 1, -1, -1):
                gc = g0 * rgb[r, s, 0] + g1 * rgb[r, s, 1] + g2 * rgb[r, s, 2]
                gs[r, s] = (trans_next * gc - after - tg) * delta[r, s]
                grgb[r, s, 0] = weights[r, s] * g0
                grgb[r, s, 1] = weights[r, s] * g1
                grgb[r, s, 2] = weights[r, s] * g2
                after = after + weights[r, s] * gc
                # T_s = T_{s+1} + w_s
                trans_next = trans_next + weights[r, s]
    return gs_arr, grgb_arr


def sample_pdf(real[:, ::1] edges, real[:, ::1] weights, double[:, ::1] u):
    cdef Py_ssize_t R = weights.shape[0], S = weights.shape[1], n = u.shape[1]
    cdef Py_ssize_t r, k, i
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((R, n), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef double total, acc, target, mass, frac
    with nogil:
        for r in range(R):
            total = 0
            for k in range(S):
                total += weights[r, k]
            for i in range(n):
                target = u[r, i] * total
                acc = 0
                k = 0
                while k < S - 1 and acc + weights[r, k] <= target:
                    acc += weights[r, k]
                    k += 1
                mass = weights[r, k]
                frac = (target - acc) / mass if mass > 0 else 0.0
                if frac < 0:
                    frac = 0
                elif frac > 1:
                    frac = 1
                out[r, i] = edges[r, k] + frac * (edges[r, k + 1] - edges[r, k])
    return out_arr


def bilinear_sample(real[:, :, ::1] image, double[::1] x, double[::1] y):
    cdef Py_ssize_t H = image.shape[0], W = image.shape[1], C = image.shape[2]
    cdef Py_ssize_t P = x.shape[0], p, c, x0, y0, x1, y1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((P, C), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef double px, py
    cdef real fx, fy, top, bottom
    with nogil:
        for p in range(P):
            px = min(max(x[p], 0.0), W - 1.0)
            py = min(max(y[p], 0.0), H - 1.0)
            x0 = <Py_ssize_t>floor(px)
            y0 = <Py_ssize_t>floor(py)
            x1 = min(x0 + 1, W - 1)
            y1 = min(y0 + 1, H - 1)
            fx = <real>(px - x0)
            fy = <real>(py - y0)
            for c in range(C):
                top = image[y0, x0, c] + fx * (image[y0, x1, c] - image[y0, x0, c])
                bottom = image[y1, x0, c] + fx * (image[y1, x1, c] - image[y1, x0, c])
                out[p, c] = top + fy * (bottom - top)
    return out_arr


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((B * Ho * Wo, kh * kw * C), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, i, j, di, row, yi, x0, dj0, dj1
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    # the in-bounds taps of one kernel row are a contiguous run of x
                    x0 = j * stride - pad
                    dj0 = -x0 if x0 < 0 else 0
                    dj1 = W - x0 if x0 + kw > W else kw
                    if dj1 <= dj0:
                        continue
                    for di in range(kh):
                        yi = i * stride + di - pad
                        if yi < 0 or yi >= H:
                            continue
                        memcpy(&cols[row, (di * kw + dj0) * C], &x[b, yi, x0 + dj0, 0],
                               (dj1 - dj0) * C * sizeof(real))
    return cols_arr


def col2im(real[:, ::1] cols, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t C,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    x_arr = np.zeros((B, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t b, i, j, di, dj, c, row, col, yi, xj
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    row = (b * Ho + i) * Wo + j
                    for di in range(kh):
                        yi = i * stride + di - pad
                        if yi < 0 or yi >= H:
                            continue
                        for dj in range(kw):
                            xj = j * stride + dj - pad
                            if xj < 0 or xj >= W:
                                continue
                            col = (di * kw + dj) * C
                            for c in range(C):
                                x[b, yi, xj, c] += cols[row, col + c]
    return x_arr
