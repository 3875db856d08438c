"""Weighted ultrasound-entropy maps: per-pixel Shannon entropy of the local
intensity histogram, optionally reweighted toward bright bins so hyperechoic
regions contribute more.

The inner kernel is compiled (Cython) when the extension built; otherwise a
pure-numpy implementation with identical semantics is selected at import.
Set SONODIFF_WUE_BACKEND=numpy|cython to force a backend.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import _wue_numpy
from .exceptions import ConfigurationError, ParameterError
from .imaging import UltrasoundImage

try:
    from . import _wue_core

    HAVE_COMPILED_KERNEL = True
except ImportError:  # extension not built; numpy path still fully functional
    _wue_core = None
    HAVE_COMPILED_KERNEL = False

WEIGHTINGS = ("uniform", "intensity")


@dataclass(frozen=True)
class WueConfig:
    window: int = 15  # odd window side length, pixels
    bins: int = 64
    weighting: str = "intensity"

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigurationError(f"window must be odd and >= 3, got {self.window}")
        if self.bins < 2:
            raise ConfigurationError(f"bins must be >= 2, got {self.bins}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(
                f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}"
            )

    @property
    def max_entropy(self) -> float:
        return math.log2(self.bins)


def _default_backend() -> str:
    env = os.environ.get("SONODIFF_WUE_BACKEND", "auto")
    if env == "cython" and not HAVE_COMPILED_KERNEL:
        raise ConfigurationError("compiled entropy kernel requested but not built")
    if env in ("cython", "numpy"):
        return env
    return "cython" if HAVE_COMPILED_KERNEL else "numpy"


def active_backend() -> str:
    """Name of the kernel backend wue_map will use by default."""
    return _default_backend()


def bin_weights(cfg: WueConfig) -> np.ndarray:
    """Per-bin weights, normalized to sum to 1 (scale cancels anyway)."""
    if cfg.weighting == "uniform":
        w = np.ones(cfg.bins, dtype=np.float64)
    else:
        w = (np.arange(cfg.bins, dtype=np.float64) + 0.5) / cfg.bins
    return w / w.sum()


def wue_map(image: UltrasoundImage, cfg: WueConfig, backend: str | None = None) -> np.ndarray:
    """Weighted entropy of the window histogram around every pixel.

    Histograms are taken over the fixed range [0, 1] (not per-window min-max)
    so maps are comparable across images; borders use reflective padding.
    Returns a float64 map with the input's shape, bounded by [0, log2(bins)].
    """
    if cfg.window > min(image.height, image.width):
        raise ParameterError(
            f"window {cfg.window} exceeds image extent {image.shape}"
        )
    backend = backend or _default_backend()
    if backend not in ("cython", "numpy"):
        raise ConfigurationError(f"unknown backend {backend!r}")
    if backend == "cython" and not HAVE_COMPILED_KERNEL:
        raise ConfigurationError("compiled entropy kernel requested but not built")

    r = cfg.window // 2
    padded = np.pad(image.pixels.astype(np.float64), r, mode="reflect")
    idx = np.minimum((padded * cfg.bins).astype(np.int32), cfg.bins - 1)
    weights = bin_weights(cfg)
    if backend == "cython":
        return _wue_core.weighted_entropy_map(idx, cfg.window, weights)
    return _wue_numpy.weighted_entropy_map(idx, cfg.window, weights)
