"""Pure-numpy fallback for the windowed weighted-entropy kernel.

Window counts come from per-bin integral images (exact int64 arithmetic),
and the weighted-entropy accumulation walks bins in the same order as the
compiled kernel so both backends agree to the last few ulps.
"""

from __future__ import annotations

import numpy as np


def _window_counts(indicator: np.ndarray, window: int) -> np.ndarray:
    s = np.zeros((indicator.shape[0] + 1, indicator.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(indicator, axis=0), axis=1, out=s[1:, 1:])
    return (
        s[window:, window:]
        - s[:-window, window:]
        - s[window:, :-window]
        + s[:-window, :-window]
    )


def weighted_entropy_map(bin_idx: np.ndarray, window: int, weights: np.ndarray) -> np.ndarray:
    """Same contract as the compiled kernel: bin_idx is the padded, quantized
    image; returns the entropy map over all full-window positions."""
    n_bins = weights.shape[0]
    out_h = bin_idx.shape[0] - window + 1
    out_w = bin_idx.shape[1] - window + 1

    counts = np.empty((n_bins, out_h, out_w), dtype=np.int32)
    for b in range(n_bins):
        counts[b] = _window_counts((bin_idx == b).astype(np.int64), window)

    total = np.zeros((out_h, out_w), dtype=np.float64)
    for b in range(n_bins):
        total += weights[b] * counts[b]

    acc = np.zeros((out_h, out_w), dtype=np.float64)
    for b in range(n_bins):
        occupied = counts[b] > 0
        if not occupied.any():
            continue
        q = np.where(occupied, weights[b] * counts[b] / total, 1.0)
        acc -= np.where(occupied, q * np.log2(q), 0.0)
    return acc
