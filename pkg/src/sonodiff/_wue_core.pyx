# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel for windowed weighted-entropy maps.

Slides a histogram along each output row: the full window is counted once
per row, then columns are updated incrementally (drop the leaving column,
add the entering one), so the cost per pixel is O(window + bins) instead of
O(window^2 + bins).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log2

cnp.import_array()


def weighted_entropy_map(cnp.int32_t[:, ::1] bin_idx, int window, double[::1] weights):
    """Entropy of the weighted window histogram around every interior pixel.

    bin_idx is the reflect-padded image already quantized to bin indices; the
    output has shape (bin_idx.shape[0] - window + 1, bin_idx.shape[1] - window + 1).
    """
    cdef int n_bins = weights.shape[0]
    cdef int out_h = bin_idx.shape[0] - window + 1
    cdef int out_w = bin_idx.shape[1] - window + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((out_h, out_w), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hist_arr = np.zeros(n_bins, dtype=np.int64)
    cdef cnp.int64_t[::1] hist = hist_arr
    cdef double[:, ::1] out_view = out

    cdef int i, j, r, c, b
    cdef double q, total, acc

    for i in range(out_h):
        for b in range(n_bins):
            hist[b] = 0
        for r in range(window):
            for c in range(window):
                hist[bin_idx[i + r, c]] += 1
        for j in range(out_w):
            if j > 0:
                for r in range(window):
                    hist[bin_idx[i + r, j - 1]] -= 1
                    hist[bin_idx[i + r, j + window - 1]] += 1
            total = 0.0
            for b in range(n_bins):
                if hist[b] > 0:
                    total += weights[b] * hist[b]
            acc = 0.0
            for b in range(n_bins):
                if hist[b] > 0:
                    q = weights[b] * hist[b] / total
                    acc -= q * log2(q)
            out_view[i, j] = acc
    return out
