# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: BLAS-backed affine maps plus fused loops for layer
normalization and activations.

Interface and semantics match ``numpy_kernels``.  All reductions run in a
fixed order (BLAS blocking for matrix products, sequential trailing-axis
loops elsewhere), so repeat runs on one machine are bit-identical.
"""

import numpy as np

from libc.math cimport erf, erff, exp, expf, sqrt, sqrtf
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "cython"

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865475244
cdef double INV_SQRT2PI = 0.3989422804014326779


cdef inline void _zero_fill(real[:, ::1] c) noexcept:
    cdef Py_ssize_t i, j
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            c[i, j] = 0


# C = A @ B, row-major operands; computed as C^T = B^T A^T in BLAS's
# column-major world (a row-major M x N buffer is a column-major N x M one).
cdef void _gemm_nn(real[:, ::1] a, real[:, ::1] b, real[:, ::1] c) noexcept:
    cdef int m = <int> a.shape[0]
    cdef int k = <int> a.shape[1]
    cdef int n = <int> b.shape[1]
    cdef real one = 1, zero = 0
    cdef char cn = b'N'
    if m == 0 or n == 0:
        return
    if k == 0:
        _zero_fill(c)
        return
    if real is float:
        sgemm(&cn, &cn, &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &k, &zero, &c[0, 0], &n)
    else:
        dgemm(&cn, &cn, &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &k, &zero, &c[0, 0], &n)


# C = A @ B^T with A (M,K), B (N,K), C (M,N), all row-major.
cdef void _gemm_nt(real[:, ::1] a, real[:, ::1] b, real[:, ::1] c) noexcept:
    cdef int m = <int> a.shape[0]
    cdef int k = <int> a.shape[1]
    cdef int n = <int> b.shape[0]
    cdef real one = 1, zero = 0
    cdef char cn = b'N'
    cdef char ct = b'T'
    if m == 0 or n == 0:
        return
    if k == 0:
        _zero_fill(c)
        return
    if real is float:
        sgemm(&ct, &cn, &n, &m, &k, &one, &b[0, 0], &k, &a[0, 0], &k, &zero, &c[0, 0], &n)
    else:
        dgemm(&ct, &cn, &n, &m, &k, &one, &b[0, 0], &k, &a[0, 0], &k, &zero, &c[0, 0], &n)


# C = A^T @ B with A (R,M), B (R,N), C (M,N), all row-major.
cdef void _gemm_tn(real[:, ::1] a, real[:, ::1] b, real[:, ::1] c) noexcept:
    cdef int r = <int> a.shape[0]
    cdef int m = <int> a.shape[1]
    cdef int n = <int> b.shape[1]
    cdef real one = 1, zero = 0
    cdef char cn = b'N'
    cdef char ct = b'T'
    if m == 0 or n == 0:
        return
    if r == 0:
        _zero_fill(c)
        return
    if real is float:
        sgemm(&cn, &ct, &n, &m, &r, &one, &b[0, 0], &n, &a[0, 0], &m, &zero, &c[0, 0], &n)
    else:
        dgemm(&cn, &ct, &n, &m, &r, &one, &b[0, 0], &n, &a[0, 0], &m, &zero, &c[0, 0], &n)


def linear_fwd(real[:, ::1] x, real[:, ::1] w):
    # x: (rows, k_in), w: (k_out, k_in) -> (rows, k_out)
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y = np.empty((x.shape[0], w.shape[0]), dtype=dtype)
    cdef real[:, ::1] yv = y
    _gemm_nt(x, w, yv)
    return y


def linear_bwd_x(real[:, ::1] gy, real[:, ::1] w):
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx = np.empty((gy.shape[0], w.shape[1]), dtype=dtype)
    cdef real[:, ::1] gxv = gx
    _gemm_nn(gy, w, gxv)
    return gx


def linear_bwd_w(real[:, ::1] gy, real[:, ::1] x):
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gw = np.empty((gy.shape[1], x.shape[1]), dtype=dtype)
    cdef real[:, ::1] gwv = gw
    _gemm_tn(gy, x, gwv)
    return gw


def layer_norm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y = np.empty((rows, d), dtype=dtype)
    xhat = np.empty((rows, d), dtype=dtype)
    invstd = np.empty(rows, dtype=dtype)
    cdef real[:, ::1] yv = y
    cdef real[:, ::1] xh = xhat
    cdef real[::1] istd = invstd
    cdef Py_ssize_t r, k
    cdef real mean, var, diff, s
    for r in range(rows):
        mean = 0
        for k in range(d):
            mean += x[r, k]
        mean /= d
        var = 0
        for k in range(d):
            diff = x[r, k] - mean
            var += diff * diff
        var /= d
        if real is float:
            s = <real> (1.0 / sqrtf(var + <float> eps))
        else:
            s = 1.0 / sqrt(var + eps)
        istd[r] = s
        for k in range(d):
            xh[r, k] = (x[r, k] - mean) * s
            yv[r, k] = xh[r, k] * gamma[k] + beta[k]
    return y, xhat, invstd


def layer_norm_bwd(real[:, ::1] gy, real[:, ::1] xhat, real[::1] invstd, real[::1] gamma):
    cdef Py_ssize_t rows = gy.shape[0]
    cdef Py_ssize_t d = gy.shape[1]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx = np.empty((rows, d), dtype=dtype)
    ggamma = np.zeros(d, dtype=dtype)
    gbeta = np.zeros(d, dtype=dtype)
    cdef real[:, ::1] gxv = gx
    cdef real[::1] gg = ggamma
    cdef real[::1] gb = gbeta
    cdef Py_ssize_t r, k
    cdef real s1, s2, gyg
    for r in range(rows):
        s1 = 0
        s2 = 0
        for k in range(d):
            gyg = gy[r, k] * gamma[k]
            s1 += gyg
            s2 += gyg * xhat[r, k]
        s1 /= d
        s2 /= d
        for k in range(d):
            gyg = gy[r, k] * gamma[k]
            gxv[r, k] = (gyg - s1 - xhat[r, k] * s2) * invstd[r]
            gg[k] += gy[r, k] * xhat[r, k]
            gb[k] += gy[r, k]
    return gx, ggamma, gbeta


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t m = x.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y = np.empty(m, dtype=dtype)
    cdef real[::1] yv = y
    cdef Py_ssize_t i
    if real is float:
        for i in range(m):
            yv[i] = <real> (0.5 * x[i] * (1.0 + erff(x[i] * <float> INV_SQRT2)))
    else:
        for i in range(m):
            yv[i] = 0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2))
    return y


def gelu_bwd(real[::1] gy, real[::1] x):
    cdef Py_ssize_t m = x.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx = np.empty(m, dtype=dtype)
    cdef real[::1] gxv = gx
    cdef Py_ssize_t i
    cdef real cdf, pdf
    if real is float:
        for i in range(m):
            cdf = <real> (0.5 * (1.0 + erff(x[i] * <float> INV_SQRT2)))
            pdf = <real> (expf(<float> (-0.5) * x[i] * x[i]) * <float> INV_SQRT2PI)
            gxv[i] = gy[i] * (cdf + x[i] * pdf)
    else:
        for i in range(m):
            cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
            pdf = exp(-0.5 * x[i] * x[i]) * INV_SQRT2PI
            gxv[i] = gy[i] * (cdf + x[i] * pdf)
    return gx


def sigmoid_fwd(real[::1] x):
    cdef Py_ssize_t m = x.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y = np.empty(m, dtype=dtype)
    cdef real[::1] yv = y
    cdef Py_ssize_t i
    cdef real e
    if real is float:
        for i in range(m):
            if x[i] >= 0:
                yv[i] = <real> (1.0 / (1.0 + expf(-x[i])))
            else:
                e = expf(x[i])
                yv[i] = e / (1 + e)
    else:
        for i in range(m):
            if x[i] >= 0:
                yv[i] = 1.0 / (1.0 + exp(-x[i]))
            else:
                e = exp(x[i])
                yv[i] = e / (1 + e)
    return y


def sigmoid_bwd(real[::1] gy, real[::1] y):
    cdef Py_ssize_t m = y.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx = np.empty(m, dtype=dtype)
    cdef real[::1] gxv = gx
    cdef Py_ssize_t i
    for i in range(m):
        gxv[i] = gy[i] * y[i] * (1 - y[i])
    return gx


def relu_fwd(real[::1] x):
    cdef Py_ssize_t m = x.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y = np.empty(m, dtype=dtype)
    cdef real[::1] yv = y
    cdef Py_ssize_t i
    for i in range(m):
        yv[i] = x[i] if x[i] > 0 else 0
    return y


def relu_bwd(real[::1] gy, real[::1] x):
    cdef Py_ssize_t m = x.shape[0]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx = np.empty(m, dtype=dtype)
    cdef real[::1] gxv = gx
    cdef Py_ssize_t i
    for i in range(m):
        gxv[i] = gy[i] if x[i] > 0 else 0
    return gx
