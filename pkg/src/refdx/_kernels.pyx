# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled retrieval kernels: row-wise cosine scores and stable top-k."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def cosine_scores(const double[:, ::1] rows, const double[::1] query):
    """Cosine similarity of ``query`` against every row.

    Zero-norm rows or query yield NaN; the caller turns that into an error.
    """
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot, rr, qq, x, qn
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out

    qq = 0.0
    for j in range(d):
        qq += query[j] * query[j]
    qn = sqrt(qq)

    with nogil:
        for i in range(n):
            dot = 0.0
            rr = 0.0
            for j in range(d):
                x = rows[i, j]
                dot += x * query[j]
                rr += x * x
            if rr == 0.0 or qn == 0.0:
                res[i] = 0.0 / 0.0
            else:
                res[i] = dot / (sqrt(rr) * qn)
    return out


def top_k_indices(const double[::1] scores, Py_ssize_t k):
    """Indices of the ``k`` largest scores, ties broken by lower index.

    Bounded insertion into a sorted buffer, O(n*k).
    """
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t m = k if k < n else n
    cdef Py_ssize_t filled = 0
    cdef Py_ssize_t i, pos
    cdef double s
    idx_out = np.empty(m, dtype=np.int64)
    val_out = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_out
    cdef double[::1] val = val_out

    if m == 0:
        return idx_out

    with nogil:
        for i in range(n):
            s = scores[i]
            # strict '>' keeps earlier indices ahead of later ties
            if filled == m and not (s > val[m - 1]):
                continue
            pos = filled if filled < m else m - 1
            while pos > 0 and s > val[pos - 1]:
                if pos < m:
                    val[pos] = val[pos - 1]
                    idx[pos] = idx[pos - 1]
                pos -= 1
            val[pos] = s
            idx[pos] = i
            if filled < m:
                filled += 1
    return idx_out
