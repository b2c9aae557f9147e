# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Histogram split search for regression trees (compiled kernel)."""

from libc.stdlib cimport calloc, free
from libc.string cimport memset

import numpy as np


def best_split(const unsigned short[:, ::1] codes, const double[::1] y,
               const Py_ssize_t[::1] rows, const Py_ssize_t[::1] cols,
               const Py_ssize_t[::1] n_bins, Py_ssize_t min_rows):
    """Best variance-reduction split of ``rows`` over candidate ``cols``.

    Returns ``(feature, bin, gain)``; rows with ``code <= bin`` go left.
    ``feature`` is -1 when no admissible split exists.
    """
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t ncols = cols.shape[0]
    cdef Py_ssize_t i, j, b, f, nb, max_bins = 0
    cdef double total = 0.0
    cdef double s_left, parent, gain
    cdef Py_ssize_t c_left, c_right
    cdef Py_ssize_t best_f = -1, best_b = -1
    cdef double best_gain = 0.0
    cdef double *hsum
    cdef Py_ssize_t *hcnt

    for j in range(ncols):
        if n_bins[cols[j]] > max_bins:
            max_bins = n_bins[cols[j]]
    if n < 2 * min_rows or max_bins < 2:
        return -1, -1, 0.0
    for i in range(n):
        total += y[rows[i]]
    parent = total * total / n

    hsum = <double *> calloc(max_bins, sizeof(double))
    hcnt = <Py_ssize_t *> calloc(max_bins, sizeof(Py_ssize_t))
    if hsum == NULL or hcnt == NULL:
        free(hsum)
        free(hcnt)
        raise MemoryError()
    try:
        for j in range(ncols):
            f = cols[j]
            nb = n_bins[f]
            if nb < 2:
                continue
            memset(hsum, 0, nb * sizeof(double))
            memset(hcnt, 0, nb * sizeof(Py_ssize_t))
            for i in range(n):
                b = codes[rows[i], f]
                hsum[b] += y[rows[i]]
                hcnt[b] += 1
            s_left = 0.0
            c_left = 0
            for b in range(nb - 1):
                s_left += hsum[b]
                c_left += hcnt[b]
                c_right = n - c_left
                if c_left < min_rows:
                    continue
                if c_right < min_rows:
                    break
                gain = (s_left * s_left / c_left
                        + (total - s_left) * (total - s_left) / c_right - parent)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
    finally:
        free(hsum)
        free(hcnt)
    return best_f, best_b, best_gain
