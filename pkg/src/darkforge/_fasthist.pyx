# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/add/bin kernel for Y-histogram probes.

The kernel does no transcendental math: white balance, gamma, and the
BT.601 luma weights are baked into the lookup tables built on the
Python side, so this loop and the numpy fallback produce bit-identical
counts. Per 2x2 cell it gathers the quantized level of each CFA site,
sums the three precomputed luma contributions in a fixed association
order, and increments one histogram bin.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def hist_kernel(const cnp.uint16_t[::1] r,
                const cnp.uint16_t[::1] g1,
                const cnp.uint16_t[::1] g2,
                const cnp.uint16_t[::1] b,
                const cnp.int32_t[::1] qlut,
                const cnp.float64_t[::1] lut_r,
                const cnp.float64_t[::1] lut_g2,
                const cnp.float64_t[::1] lut_b,
                int bins):
    cdef Py_ssize_t n = r.shape[0]
    if g1.shape[0] != n or g2.shape[0] != n or b.shape[0] != n:
        raise ValueError("site arrays must share one length")
    counts_arr = np.zeros(bins, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef Py_ssize_t i
    cdef int qr, k, qb, idx
    cdef double y
    cdef float y32
    with nogil:
        for i in range(n):
            qr = qlut[r[i]]
            k = qlut[g1[i]] + qlut[g2[i]]
            qb = qlut[b[i]]
            # association order matches the numpy path exactly
            y = (lut_r[qr] + lut_g2[k]) + lut_b[qb]
            y32 = <float> y
            idx = <int> (<double> y32 * bins)
            if idx >= bins:
                idx = bins - 1
            counts[idx] += 1
    return counts_arr
