# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Same signatures and numerical contract as ``_numpy_ref``: 2D C-contiguous
float32/float64 inputs, per-element math and reductions carried out in
double precision, result cast back to the input dtype. All arrays passed to
one call must share a dtype.
"""

from libc.math cimport exp, sqrt, tanh

import numpy as np

ctypedef fused floating:
    float
    double

BACKEND = "cy"


cdef inline object _dtype_of(floating[:, ::1] x):
    return np.float32 if floating is float else np.float64


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, s, v
    out_np = np.empty((r, d), dtype=_dtype_of(x))
    cdef floating[:, ::1] y = out_np
    cdef double[::1] e = np.empty(d, dtype=np.float64)
    for i in range(r):
        m = <double> x[i, 0]
        for j in range(1, d):
            if <double> x[i, j] > m:
                m = <double> x[i, j]
        s = 0.0
        for j in range(d):
            v = exp(<double> x[i, j] - m)
            e[j] = v
            s += v
        for j in range(d):
            y[i, j] = <floating> (e[j] / s)
    return out_np


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t r = y.shape[0], d = y.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    out_np = np.empty((r, d), dtype=_dtype_of(y))
    cdef floating[:, ::1] gx = out_np
    for i in range(r):
        dot = 0.0
        for j in range(d):
            dot += (<double> gy[i, j]) * (<double> y[i, j])
        for j in range(d):
            gx[i, j] = <floating> ((<double> y[i, j]) * ((<double> gy[i, j]) - dot))
    return out_np


def layernorm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double s, q, mu, dv, rs
    dtype = _dtype_of(x)
    y_np = np.empty((r, d), dtype=dtype)
    mean_np = np.empty(r, dtype=dtype)
    rstd_np = np.empty(r, dtype=dtype)
    cdef floating[:, ::1] y = y_np
    cdef floating[::1] mean = mean_np
    cdef floating[::1] rstd = rstd_np
    for i in range(r):
        s = 0.0
        for j in range(d):
            s += <double> x[i, j]
        mu = s / d
        q = 0.0
        for j in range(d):
            dv = (<double> x[i, j]) - mu
            q += dv * dv
        rs = 1.0 / sqrt(q / d + eps)
        for j in range(d):
            y[i, j] = <floating> (((<double> x[i, j]) - mu) * rs * (<double> gamma[j])
                                  + (<double> beta[j]))
        mean[i] = <floating> mu
        rstd[i] = <floating> rs
    return y_np, mean_np, rstd_np


def layernorm_bwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] mean,
                  floating[::1] rstd, floating[:, ::1] gy):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mu, rs, m1, m2, xhat, gg
    dtype = _dtype_of(x)
    gx_np = np.empty((r, d), dtype=dtype)
    cdef floating[:, ::1] gx = gx_np
    cdef double[::1] dgamma = np.zeros(d, dtype=np.float64)
    cdef double[::1] dbeta = np.zeros(d, dtype=np.float64)
    for i in range(r):
        mu = <double> mean[i]
        rs = <double> rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = ((<double> x[i, j]) - mu) * rs
            gg = (<double> gy[i, j]) * (<double> gamma[j])
            m1 += gg
            m2 += gg * xhat
            dgamma[j] += (<double> gy[i, j]) * xhat
            dbeta[j] += <double> gy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = ((<double> x[i, j]) - mu) * rs
            gg = (<double> gy[i, j]) * (<double> gamma[j])
            gx[i, j] = <floating> ((gg - m1 - xhat * m2) * rs)
    return gx_np, np.asarray(dgamma).astype(dtype), np.asarray(dbeta).astype(dtype)


cdef double _GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fwd(floating[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double v, inner
    out_np = np.empty((r, d), dtype=_dtype_of(x))
    cdef floating[:, ::1] y = out_np
    for i in range(r):
        for j in range(d):
            v = <double> x[i, j]
            inner = _GELU_C * (v + 0.044715 * v * v * v)
            y[i, j] = <floating> (0.5 * v * (1.0 + tanh(inner)))
    return out_np


def gelu_bwd(floating[:, ::1] x, floating[:, ::1] gy):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double v, inner, t, dinner, local
    out_np = np.empty((r, d), dtype=_dtype_of(x))
    cdef floating[:, ::1] gx = out_np
    for i in range(r):
        for j in range(d):
            v = <double> x[i, j]
            inner = _GELU_C * (v + 0.044715 * v * v * v)
            t = tanh(inner)
            dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
            local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
            gx[i, j] = <floating> ((<double> gy[i, j]) * local)
    return out_np


def rope_fwd(floating[:, ::1] x, floating[:, ::1] cos, floating[:, ::1] sin):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t rm = cos.shape[0], half = cos.shape[1]
    cdef Py_ssize_t i, p, k
    cdef double c, s, x0, x1
    out_np = np.empty((r, d), dtype=_dtype_of(x))
    cdef floating[:, ::1] y = out_np
    for i in range(r):
        k = i % rm
        for p in range(half):
            c = <double> cos[k, p]
            s = <double> sin[k, p]
            x0 = <double> x[i, 2 * p]
            x1 = <double> x[i, 2 * p + 1]
            y[i, 2 * p] = <floating> (x0 * c - x1 * s)
            y[i, 2 * p + 1] = <floating> (x0 * s + x1 * c)
    return out_np


def rope_bwd_x(floating[:, ::1] gy, floating[:, ::1] cos, floating[:, ::1] sin):
    cdef Py_ssize_t r = gy.shape[0], d = gy.shape[1]
    cdef Py_ssize_t rm = cos.shape[0], half = cos.shape[1]
    cdef Py_ssize_t i, p, k
    cdef double c, s, g0, g1
    out_np = np.empty((r, d), dtype=_dtype_of(gy))
    cdef floating[:, ::1] gx = out_np
    for i in range(r):
        k = i % rm
        for p in range(half):
            c = <double> cos[k, p]
            s = <double> sin[k, p]
            g0 = <double> gy[i, 2 * p]
            g1 = <double> gy[i, 2 * p + 1]
            gx[i, 2 * p] = <floating> (g0 * c + g1 * s)
            gx[i, 2 * p + 1] = <floating> (-g0 * s + g1 * c)
    return out_np


def rope_bwd_theta(floating[:, ::1] x, floating[:, ::1] gy,
                   floating[:, ::1] cos, floating[:, ::1] sin):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t rm = cos.shape[0], half = cos.shape[1]
    cdef Py_ssize_t i, p, k
    cdef double c, s, x0, x1, g0, g1
    acc_np = np.zeros((rm, half), dtype=np.float64)
    cdef double[:, ::1] acc = acc_np
    for i in range(r):
        k = i % rm
        for p in range(half):
            c = <double> cos[k, p]
            s = <double> sin[k, p]
            x0 = <double> x[i, 2 * p]
            x1 = <double> x[i, 2 * p + 1]
            g0 = <double> gy[i, 2 * p]
            g1 = <double> gy[i, 2 * p + 1]
            acc[k, p] += g0 * (-x0 * s - x1 * c) + g1 * (x0 * c - x1 * s)
    return acc_np.astype(_dtype_of(x))
