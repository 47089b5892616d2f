# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels.

Every reduction here is a plain left-to-right loop, so results depend only on
the input values and never on thread count or SIMD width.
"""
import numpy as np

from libc.math cimport exp, log


def log_softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, s, lse
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                s += exp(x[i, j] - m)
            lse = log(s)
            for j in range(c):
                o[i, j] = (x[i, j] - m) - lse
    return out


def log_softmax_backward_rows(const double[:, ::1] g, const double[:, ::1] out):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], i, j
    res = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] r = res
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(c):
                s += g[i, j]
            for j in range(c):
                r[i, j] = g[i, j] - exp(out[i, j]) * s
    return res


def rank_rows(const double[:, ::1] p, Py_ssize_t k):
    """Indices of the k largest entries per row; ties go to the lower index."""
    cdef Py_ssize_t n = p.shape[0], c = p.shape[1], i, j, filled, pos
    if k < 1 or k > c:
        raise ValueError(f"k={k} must lie in [1, {c}]")
    idx = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] ix = idx
    vals_buf = np.empty(k, dtype=np.float64)
    cdef double[::1] vals = vals_buf
    cdef double v
    with nogil:
        for i in range(n):
            filled = 0
            for j in range(c):
                v = p[i, j]
                if filled == k and not (v > vals[k - 1]):
                    continue
                pos = filled if filled < k else k - 1
                # strict comparison keeps earlier (lower-index) equals ahead
                while pos > 0 and v > vals[pos - 1]:
                    if pos < k:
                        vals[pos] = vals[pos - 1]
                        ix[i, pos] = ix[i, pos - 1]
                    pos -= 1
                vals[pos] = v
                ix[i, pos] = j
                if filled < k:
                    filled += 1
    return idx


def negentropy_rows(const double[:, ::1] t):
    """Row-wise sum of t*ln(t) with 0*ln(0) taken as 0."""
    cdef Py_ssize_t n = t.shape[0], c = t.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double s, v
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(c):
                v = t[i, j]
                if v > 0.0:
                    s += v * log(v)
            o[i] = s
    return out
