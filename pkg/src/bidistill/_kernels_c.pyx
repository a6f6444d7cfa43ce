# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bag-encoder and SGD kernels.

Same contracts as ``_kernels_py``.  Matrix products go through the BLAS that
scipy links against; elementwise work runs in C loops.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void gemm_rm(bint ta, bint tb, int m, int n, int k, double alpha,
                         double* a, int lda, double* b, int ldb, double beta,
                         double* c, int ldc) noexcept nogil:
    # row-major C(m x n) = alpha * op(A) op(B) + beta * C, via column-major BLAS on the transposes
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    dgemm(&ctb, &cta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline void fill_bias(double[:, ::1] y, double[::1] b) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            y[i, j] = b[j]


cdef inline void relu_inplace(double[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            if y[i, j] < 0.0:
                y[i, j] = 0.0


cdef inline void mask_by(double[:, ::1] g, double[:, ::1] act) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            if not act[i, j] > 0.0:
                g[i, j] = 0.0


cdef inline void colsum_add(double[:, ::1] g, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            out[j] += g[i, j]


def bag_forward(x, weights):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    wa, ba, w1, b1, w2, b2, w3, b3 = weights
    cdef double[:, ::1] Wa = wa, W1 = w1, W2 = w2, W3 = w3
    cdef double[::1] Ba = ba, B1 = b1, B2 = b2, B3 = b3
    cdef int t = xv.shape[0], dw = xv.shape[1], dh = Wa.shape[1], k1 = W1.shape[1], k2 = W2.shape[1]
    if Wa.shape[0] != dw or W1.shape[0] != dh or W2.shape[0] != k1 or W3.shape[0] != k2:
        raise ValueError("bag encoder weight shapes do not chain")

    h_arr = np.empty((t, dh))
    a1_arr = np.empty((t, k1))
    a2_arr = np.empty((t, k2))
    att_arr = np.empty(t)
    pooled_arr = np.zeros(dh)
    cdef double[:, ::1] h = h_arr, a1 = a1_arr, a2 = a2_arr
    cdef double[::1] att = att_arr, pooled = pooled_arr
    cdef Py_ssize_t i, j
    cdef double s, smax, total

    with nogil:
        fill_bias(h, Ba)
        gemm_rm(False, False, t, dh, dw, 1.0, &xv[0, 0], dw, &Wa[0, 0], dh, 1.0, &h[0, 0], dh)
        relu_inplace(h)
        fill_bias(a1, B1)
        gemm_rm(False, False, t, k1, dh, 1.0, &h[0, 0], dh, &W1[0, 0], k1, 1.0, &a1[0, 0], k1)
        relu_inplace(a1)
        fill_bias(a2, B2)
        gemm_rm(False, False, t, k2, k1, 1.0, &a1[0, 0], k1, &W2[0, 0], k2, 1.0, &a2[0, 0], k2)
        relu_inplace(a2)
        smax = -1e308
        for i in range(t):
            s = B3[0]
            for j in range(k2):
                s = s + a2[i, j] * W3[j, 0]
            att[i] = s
            if s > smax:
                smax = s
        total = 0.0
        for i in range(t):
            att[i] = exp(att[i] - smax)
            total = total + att[i]
        for i in range(t):
            att[i] = att[i] / total
        for i in range(t):
            for j in range(dh):
                pooled[j] += att[i] * h[i, j]
    return pooled_arr, att_arr, (np.asarray(xv), h_arr, a1_arr, a2_arr, att_arr)


def bag_backward(cache, g_pooled, weights, grads):
    x_arr, h_arr, a1_arr, a2_arr, att_arr = cache
    cdef double[:, ::1] xv = x_arr, h = h_arr, a1 = a1_arr, a2 = a2_arr
    cdef double[::1] att = att_arr
    cdef double[::1] g = np.ascontiguousarray(g_pooled, dtype=np.float64)
    wa, ba, w1, b1, w2, b2, w3, b3 = weights
    gwa, gba, gw1, gb1, gw2, gb2, gw3, gb3 = grads
    cdef double[:, ::1] W1 = w1, W2 = w2, W3 = w3
    cdef double[:, ::1] GWa = gwa, GW1 = gw1, GW2 = gw2, GW3 = gw3
    cdef double[::1] GBa = gba, GB1 = gb1, GB2 = gb2, GB3 = gb3
    cdef int t = xv.shape[0], dw = xv.shape[1], dh = h.shape[1], k1 = a1.shape[1], k2 = a2.shape[1]

    gh_arr = np.empty((t, dh))
    ga1_arr = np.empty((t, k1))
    ga2_arr = np.empty((t, k2))
    gs_arr = np.empty(t)
    cdef double[:, ::1] gh = gh_arr, ga1 = ga1_arr, ga2 = ga2_arr
    cdef double[::1] gs = gs_arr
    cdef Py_ssize_t i, j
    cdef double acc, dot

    with nogil:
        # pooled = att @ h
        dot = 0.0
        for i in range(t):
            acc = 0.0
            for j in range(dh):
                gh[i, j] = att[i] * g[j]
                acc = acc + h[i, j] * g[j]
            gs[i] = acc
            dot = dot + att[i] * acc
        for i in range(t):
            gs[i] = att[i] * (gs[i] - dot)
        # attention logits = a2 @ W3 + b3
        for i in range(t):
            GB3[0] += gs[i]
            for j in range(k2):
                GW3[j, 0] += a2[i, j] * gs[i]
                ga2[i, j] = gs[i] * W3[j, 0] if a2[i, j] > 0.0 else 0.0
        gemm_rm(True, False, k1, k2, t, 1.0, &a1[0, 0], k1, &ga2[0, 0], k2, 1.0, &GW2[0, 0], k2)
        colsum_add(ga2, GB2)
        gemm_rm(False, True, t, k1, k2, 1.0, &ga2[0, 0], k2, &W2[0, 0], k2, 0.0, &ga1[0, 0], k1)
        mask_by(ga1, a1)
        gemm_rm(True, False, dh, k1, t, 1.0, &h[0, 0], dh, &ga1[0, 0], k1, 1.0, &GW1[0, 0], k1)
        colsum_add(ga1, GB1)
        gemm_rm(False, True, t, dh, k1, 1.0, &ga1[0, 0], k1, &W1[0, 0], k1, 1.0, &gh[0, 0], dh)
        mask_by(gh, h)
        gemm_rm(True, False, dw, dh, t, 1.0, &xv[0, 0], dw, &gh[0, 0], dh, 1.0, &GWa[0, 0], dh)
        colsum_add(gh, GBa)


def sgd_update(value, grad, velocity, double lr, double momentum, double weight_decay):
    if not (value.flags.c_contiguous and grad.flags.c_contiguous and velocity.flags.c_contiguous):
        raise ValueError("sgd_update needs C-contiguous arrays")
    cdef double[::1] th = value.reshape(-1)
    cdef double[::1] gr = grad.reshape(-1)
    cdef double[::1] v = velocity.reshape(-1)
    cdef Py_ssize_t i, n = th.shape[0]
    cdef double gi
    if gr.shape[0] != n or v.shape[0] != n:
        raise ValueError("parameter, gradient and velocity sizes differ")
    with nogil:
        for i in range(n):
            gi = gr[i] + weight_decay * th[i] if weight_decay != 0.0 else gr[i]
            v[i] = momentum * v[i] - lr * gi
            th[i] = th[i] + v[i]
            gr[i] = 0.0
