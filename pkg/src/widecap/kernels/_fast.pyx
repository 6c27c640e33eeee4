# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused single-pass versions of the kernels in ``widecap.kernels.pyref``.

Same signatures and the same math; the win is avoiding numpy temporaries on
the memory-bound ops. Results may differ from the reference in the last ulp
(summation order, libm vs numpy transcendentals), which the test suite bounds
at 1e-12 relative.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, M_PI, cos, exp, sin, sqrt, tanh

cnp.import_array()

BACKEND = "fast"

cdef double GELU_C = sqrt(2.0 / M_PI)
cdef double GELU_A = 0.044715


def gelu_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] xf = x.ravel()
    out = np.empty_like(x)
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, t
    for i in range(n):
        v = xf[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        of[i] = 0.5 * v * (1.0 + t)
    return out


def gelu_bwd(x, gout):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] gf = gout.ravel()
    out = np.empty_like(x)
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, t, du
    for i in range(n):
        v = xf[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        of[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out


def softmax_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] xv = x
    out = np.empty_like(x)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, c, rows = xv.shape[0], cols = xv.shape[1]
    cdef double m, s, e
    for r in range(rows):
        m = -INFINITY
        for c in range(cols):
            if xv[r, c] > m:
                m = xv[r, c]
        s = 0.0
        for c in range(cols):
            e = exp(xv[r, c] - m)
            ov[r, c] = e
            s += e
        for c in range(cols):
            ov[r, c] /= s
    return out


def softmax_bwd(y, gout):
    y = np.ascontiguousarray(y, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = gout
    out = np.empty_like(y)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, c, rows = yv.shape[0], cols = yv.shape[1]
    cdef double inner
    for r in range(rows):
        inner = 0.0
        for c in range(cols):
            inner += gv[r, c] * yv[r, c]
        for c in range(cols):
            ov[r, c] = yv[r, c] * (gv[r, c] - inner)
    return out


def causal_softmax_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, ::1] xv = x
    out = np.zeros_like(x)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t n, m, j, mats = xv.shape[0], t = xv.shape[1]
    cdef double mx, s, e
    for n in range(mats):
        for m in range(t):
            mx = -INFINITY
            for j in range(m + 1):
                if xv[n, m, j] > mx:
                    mx = xv[n, m, j]
            s = 0.0
            for j in range(m + 1):
                e = exp(xv[n, m, j] - mx)
                ov[n, m, j] = e
                s += e
            for j in range(m + 1):
                ov[n, m, j] /= s
    return out


def causal_softmax_bwd(y, gout):
    y = np.ascontiguousarray(y, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, :, ::1] yv = y
    cdef double[:, :, ::1] gv = gout
    out = np.zeros_like(y)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t n, m, j, mats = yv.shape[0], t = yv.shape[1]
    cdef double inner
    for n in range(mats):
        for m in range(t):
            inner = 0.0
            for j in range(m + 1):
                inner += gv[n, m, j] * yv[n, m, j]
            for j in range(m + 1):
                ov[n, m, j] = yv[n, m, j] * (gv[n, m, j] - inner)
    return out


def layernorm_fwd(x, gain, bias, double eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[::1] gv = gain
    cdef double[::1] bv = bias
    out = np.empty_like(x)
    mean = np.empty(x.shape[0], dtype=np.float64)
    rstd = np.empty(x.shape[0], dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] mv = mean
    cdef double[::1] rv = rstd
    cdef Py_ssize_t r, c, rows = xv.shape[0], cols = xv.shape[1]
    cdef double mu, var, d, rs
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += xv[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = xv[r, c] - mu
            var += d * d
        var /= cols
        rs = 1.0 / sqrt(var + eps)
        mv[r] = mu
        rv[r] = rs
        for c in range(cols):
            ov[r, c] = (xv[r, c] - mu) * rs * gv[c] + bv[c]
    return out, mean, rstd


def layernorm_bwd(x, gain, mean, rstd, gout):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=np.float64)
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    rstd = np.ascontiguousarray(rstd, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[::1] gv = gain
    cdef double[::1] mv = mean
    cdef double[::1] rv = rstd
    cdef double[:, ::1] gov = gout
    gx = np.empty_like(x)
    ggain = np.zeros_like(gain)
    gbias = np.zeros_like(gain)
    cdef double[:, ::1] gxv = gx
    cdef double[::1] ggv = ggain
    cdef double[::1] gbv = gbias
    cdef Py_ssize_t r, c, rows = xv.shape[0], cols = xv.shape[1]
    cdef double s1, s2, xhat, gy, rs
    for r in range(rows):
        rs = rv[r]
        s1 = 0.0
        s2 = 0.0
        for c in range(cols):
            xhat = (xv[r, c] - mv[r]) * rs
            gy = gov[r, c] * gv[c]
            s1 += gy
            s2 += gy * xhat
            ggv[c] += gov[r, c] * xhat
            gbv[c] += gov[r, c]
        for c in range(cols):
            xhat = (xv[r, c] - mv[r]) * rs
            gy = gov[r, c] * gv[c]
            gxv[r, c] = (rs / cols) * (cols * gy - s1 - xhat * s2)
    return gx, ggain, gbias


def rope_fwd(x, pos, theta):
    x = np.ascontiguousarray(x, dtype=np.float64)
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[::1] pv = pos
    cdef double[::1] tv = theta
    out = np.empty_like(x)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, n = xv.shape[0], half = tv.shape[0]
    cdef double ang, cj, sj, a, b
    for i in range(n):
        for j in range(half):
            ang = pv[i] * tv[j]
            cj = cos(ang)
            sj = sin(ang)
            a = xv[i, 2 * j]
            b = xv[i, 2 * j + 1]
            ov[i, 2 * j] = a * cj - b * sj
            ov[i, 2 * j + 1] = a * sj + b * cj
    return out
