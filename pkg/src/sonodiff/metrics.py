"""Image-quality metrics: SSIM, PSNR, and bootstrap confidence intervals.

SSIM follows the classic formulation: an 11x11 Gaussian window (sigma 1.5),
K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over valid window positions.
The bootstrap resamples per-pair metric values (not pixels) and takes the
percentile interval of resampled means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .exceptions import ParameterError, ShapeError
from .imaging import UltrasoundImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0


def _as_array(image) -> np.ndarray:
    if isinstance(image, UltrasoundImage):
        return image.pixels.astype(np.float64)
    return np.asarray(image, dtype=np.float64)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


_WINDOW = _gaussian_window()


def ssim(x, y) -> float:
    """Mean structural similarity between two images with pixels in [0, 1]."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = fftconvolve(a, _WINDOW, mode="valid")
    mu_b = fftconvolve(b, _WINDOW, mode="valid")
    ea2 = fftconvolve(a * a, _WINDOW, mode="valid")
    eb2 = fftconvolve(b * b, _WINDOW, mode="valid")
    eab = fftconvolve(a * b, _WINDOW, mode="valid")
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def psnr(x, y) -> float:
    """Peak SNR in decibels against peak value 1; zero error reports the
    100 dB cap."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def bootstrap_ci(
    values, n_resamples: int = 1000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean, deterministic given seed."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise ParameterError("values must be a non-empty 1-D sequence")
    if not (0.0 < level < 1.0):
        raise ParameterError(f"level must lie in (0, 1), got {level}")
    if n_resamples < 1:
        raise ParameterError("n_resamples must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(n_resamples, vals.size))
    means = vals[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(low), float(high)


@dataclass
class MetricReport:
    """Aggregated SSIM/PSNR over a pair list, with per-pair values retained."""

    ssim_mean: float
    ssim_std: float
    ssim_ci_95_low: float
    ssim_ci_95_high: float
    psnr_mean: float
    psnr_std: float
    psnr_ci_95_low: float
    psnr_ci_95_high: float
    n_pairs: int
    ssim_values: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
            "ssim_ci_95_low": self.ssim_ci_95_low,
            "ssim_ci_95_high": self.ssim_ci_95_high,
            "psnr_mean": self.psnr_mean,
            "psnr_std": self.psnr_std,
            "psnr_ci_95_low": self.psnr_ci_95_low,
            "psnr_ci_95_high": self.psnr_ci_95_high,
            "n_pairs": self.n_pairs,
            "ssim_values": list(self.ssim_values),
            "psnr_values": list(self.psnr_values),
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def summary(self) -> str:
        return (
            f"SSIM {self.ssim_mean:.4f} +/- {self.ssim_std:.4f} "
            f"[{self.ssim_ci_95_low:.4f}, {self.ssim_ci_95_high:.4f}]  "
            f"PSNR {self.psnr_mean:.3f} +/- {self.psnr_std:.3f} "
            f"[{self.psnr_ci_95_low:.3f}, {self.psnr_ci_95_high:.3f}]  "
            f"(n={self.n_pairs})"
        )


def evaluate_pairs(
    predicted: list, reference: list, n_resamples: int = 1000, seed: int = 0
) -> MetricReport:
    """Score predicted images against clean references pairwise and aggregate
    with bootstrap confidence intervals."""
    if len(predicted) != len(reference):
        raise ParameterError(
            f"list lengths differ: {len(predicted)} predicted vs {len(reference)} reference"
        )
    if not predicted:
        raise ParameterError("need at least one pair to evaluate")
    ssim_vals = [ssim(p, r) for p, r in zip(predicted, reference)]
    psnr_vals = [psnr(p, r) for p, r in zip(predicted, reference)]
    s_lo, s_hi = bootstrap_ci(ssim_vals, n_resamples=n_resamples, seed=seed)
    p_lo, p_hi = bootstrap_ci(psnr_vals, n_resamples=n_resamples, seed=seed + 1)
    return MetricReport(
        ssim_mean=float(np.mean(ssim_vals)),
        ssim_std=float(np.std(ssim_vals)),
        ssim_ci_95_low=s_lo,
        ssim_ci_95_high=s_hi,
        psnr_mean=float(np.mean(psnr_vals)),
        psnr_std=float(np.std(psnr_vals)),
        psnr_ci_95_low=p_lo,
        psnr_ci_95_high=p_hi,
        n_pairs=len(predicted),
        ssim_values=ssim_vals,
        psnr_values=psnr_vals,
    )
