# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels.

Every reduction runs strictly left to right so results depend only on the
input values, never on thread count or memory alignment.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    out_arr = np.empty((n, c), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double m, s, e
    for i in range(n):
        m = -INFINITY
        for j in range(c):
            if x[i, j] > m:
                m = x[i, j]
        if m == -INFINITY:
            for j in range(c):
                out[i, j] = 0
            continue
        s = 0.0
        for j in range(c):
            e = exp(x[i, j] - m)
            out[i, j] = <real>e
            s += e
        for j in range(c):
            out[i, j] = <real>(out[i, j] / s)
    return out_arr


def softmax_rows_backward(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], c = y.shape[1], i, j
    out_arr = np.empty((n, c), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += gy[i, j] * y[i, j]
        for j in range(c):
            out[i, j] = <real>(y[i, j] * (gy[i, j] - dot))
    return out_arr


def log_softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    out_arr = np.empty((n, c), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double m, s
    for i in range(n):
        m = -INFINITY
        for j in range(c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            s += exp(x[i, j] - m)
        s = log(s) + m
        for j in range(c):
            out[i, j] = <real>(x[i, j] - s)
    return out_arr


def layer_norm_rows(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    dt = np.asarray(x).dtype
    y_arr = np.empty((n, c), dtype=dt)
    xhat_arr = np.empty((n, c), dtype=dt)
    rstd_arr = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    for i in range(n):
        mean = 0.0
        for j in range(c):
            mean += x[i, j]
        mean /= c
        var = 0.0
        for j in range(c):
            d = x[i, j] - mean
            var += d * d
        var /= c
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <real>r
        for j in range(c):
            d = (x[i, j] - mean) * r
            xhat[i, j] = <real>d
            y[i, j] = <real>(d * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_rows_backward(real[:, ::1] gy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], i, j
    dt = np.asarray(gy).dtype
    gx_arr = np.empty((n, c), dtype=dt)
    ggamma_arr = np.zeros(c, dtype=np.float64)
    gbeta_arr = np.zeros(c, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] ggamma = ggamma_arr
    cdef double[::1] gbeta = gbeta_arr
    cdef double m1, m2, gh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            gh = gy[i, j] * gamma[j]
            m1 += gh
            m2 += gh * xhat[i, j]
            ggamma[j] += gy[i, j] * xhat[i, j]
            gbeta[j] += gy[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            gh = gy[i, j] * gamma[j]
            gx[i, j] = <real>(rstd[i] * (gh - m1 - xhat[i, j] * m2))
    return gx_arr, ggamma_arr.astype(dt), gbeta_arr.astype(dt)


def sorted_sum_rows(real[:, ::1] x):
    """Sum each row after sorting it ascending, so the result ignores input order."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    out_arr = np.zeros(n, dtype=np.asarray(x).dtype)
    if c == 0:
        return out_arr
    cdef real[::1] out = out_arr
    cdef real[:, ::1] s = np.sort(np.asarray(x), axis=1)
    cdef real acc
    for i in range(n):
        acc = s[i, 0]
        for j in range(1, c):
            acc = acc + s[i, j]
        out[i] = acc
    return out_arr


def role_similarity_scan(
    double[:, ::1] q_feats,
    long long[::1] q_types,
    double[::1] q_verb,
    long long[::1] offsets,
    long long[::1] e_types,
    double[:, ::1] e_feats,
    double[:, ::1] e_verbs,
):
    """Average cosine over shared role types for every index entry.

    All feature rows must already be unit-normalised. Entries sharing no
    role type with the query score the cosine of the verb features and are
    flagged in the returned mask.
    """
    cdef Py_ssize_t n = e_verbs.shape[0], d = e_verbs.shape[1], m = q_feats.shape[0]
    cdef Py_ssize_t e, a, b, j, shared
    scores_arr = np.empty(n, dtype=np.float64)
    fallback_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] scores = scores_arr
    cdef unsigned char[::1] fallback = fallback_arr
    cdef double total, dot
    for e in range(n):
        total = 0.0
        shared = 0
        for a in range(m):
            for b in range(offsets[e], offsets[e + 1]):
                if e_types[b] == q_types[a]:
                    dot = 0.0
                    for j in range(d):
                        dot += q_feats[a, j] * e_feats[b, j]
                    if dot > 1.0:
                        dot = 1.0
                    elif dot < -1.0:
                        dot = -1.0
                    total += dot
                    shared += 1
                    break
        if shared > 0:
            scores[e] = total / shared
        else:
            dot = 0.0
            for j in range(d):
                dot += q_verb[j] * e_verbs[e, j]
            if dot > 1.0:
                dot = 1.0
            elif dot < -1.0:
                dot = -1.0
            scores[e] = dot
            fallback[e] = 1
    return scores_arr, fallback_arr
