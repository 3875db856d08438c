"""Second-order notch-filter baseline, applied along the axial (row) axis of
an image, column by column.

The design places the transfer-function zeros on the unit circle at the
notch frequency, so the rejected tone is nulled analytically while DC and
Nyquist keep unit gain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import filtfilt, freqz, lfilter

from .exceptions import ConfigurationError, ShapeError
from .imaging import UltrasoundImage


@dataclass(frozen=True)
class NotchConfig:
    center_freq: float  # normalized frequency, cycles per sample, in (0, 0.5)
    quality_factor: float = 10.0  # bandwidth = center_freq / Q
    zero_phase: bool = True

    def __post_init__(self):
        if not (0.0 < self.center_freq < 0.5):
            raise ConfigurationError(
                f"center_freq must lie in (0, 0.5), got {self.center_freq}"
            )
        if self.quality_factor <= 0.0:
            raise ConfigurationError(
                f"quality_factor must be positive, got {self.quality_factor}"
            )


class BiquadCoefficients(NamedTuple):
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2])

    @property
    def a(self) -> np.ndarray:
        return np.array([1.0, self.a1, self.a2])


def design_notch(cfg: NotchConfig) -> BiquadCoefficients:
    """Biquad notch with zeros at e^{+/- j 2 pi f0} and pole radius set by Q."""
    w0 = 2.0 * math.pi * cfg.center_freq
    alpha = math.sin(w0) / (2.0 * cfg.quality_factor)
    cos_w0 = math.cos(w0)
    a0 = 1.0 + alpha
    return BiquadCoefficients(
        b0=1.0 / a0,
        b1=-2.0 * cos_w0 / a0,
        b2=1.0 / a0,
        a1=-2.0 * cos_w0 / a0,
        a2=(1.0 - alpha) / a0,
    )


def notch_response(coeffs: BiquadCoefficients, freqs) -> np.ndarray:
    """Magnitude response |H| at normalized frequencies (cycles per sample)."""
    w = 2.0 * np.pi * np.asarray(freqs, dtype=np.float64)
    _, h = freqz(coeffs.b, coeffs.a, worN=w)
    return np.abs(h)


def _settling_length(coeffs: BiquadCoefficients) -> int:
    """Samples for the impulse-response envelope to decay below 1e-3."""
    r = math.sqrt(abs(coeffs.a2))
    if r >= 1.0 - 1e-12:
        return 1 << 16
    return max(8, int(math.ceil(math.log(1e-3) / math.log(r))))


def filter_columns(pixels: np.ndarray, cfg: NotchConfig) -> np.ndarray:
    """Filter each column (axial line) and return the unclipped float result.

    Zero-phase mode runs the filter forward then backward, squaring the
    magnitude response and cancelling phase distortion. Edges are handled by
    reflective padding sized at three settling lengths.
    """
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2:
        raise ShapeError("expected a 2-D image")
    n = px.shape[0]
    if n < 6:  # three taps per second-order section
        raise ShapeError(f"need at least 6 rows along the filter axis, got {n}")
    coeffs = design_notch(cfg)
    pad = min(n - 1, 3 * _settling_length(coeffs))
    if cfg.zero_phase:
        return filtfilt(coeffs.b, coeffs.a, px, axis=0, padtype="even", padlen=pad)
    padded = np.pad(px, ((pad, 0), (0, 0)), mode="reflect")
    out = lfilter(coeffs.b, coeffs.a, padded, axis=0)
    return out[pad:]


def apply_notch(image: UltrasoundImage, cfg: NotchConfig) -> UltrasoundImage:
    filtered = filter_columns(image.pixels, cfg)
    return UltrasoundImage(np.clip(filtered, 0.0, 1.0).astype(np.float32))
