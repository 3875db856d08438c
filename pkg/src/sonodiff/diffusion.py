"""Noise schedule, forward corruption, the latent-space training objective,
and the deterministic DDIM reverse sampler.

Timesteps are 1-based; index 0 is the clean signal, with the convention
alpha_bar(0) = 1. Schedule tables are float64 so schedule identities hold to
machine precision regardless of the training dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigurationError, ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep variance plan. Arrays are indexed by timestep, with a
    leading entry for t = 0 (beta 0, alpha 1, alpha_bar 1)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t])

    def alpha_bar(self, t: int) -> float:
        self._check(t)
        return float(self.alpha_bars[t])

    def _check(self, t: int) -> None:
        if not (0 <= t <= self.T):
            raise ParameterError(f"timestep {t} outside [0, {self.T}]")

    def alpha_bars_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.alpha_bars).to(dtype)


def build_schedule(T: int, beta_start: float = 0.0015, beta_end: float = 0.0155) -> NoiseSchedule:
    """Linear beta schedule over T steps with the stated endpoints."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    t = np.arange(1, T + 1, dtype=np.float64)
    if T == 1:
        betas_t = np.array([beta_start])
    else:
        betas_t = beta_start + (t - 1.0) * (beta_end - beta_start) / (T - 1.0)
    betas = np.concatenate([[0.0], betas_t])
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas[1:])])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-pass plan: which timesteps to visit and how much stochasticity
    to reinject (eta 0 keeps DDIM fully deterministic)."""

    timestep_subsequence: tuple
    eta: float = 0.0

    def __post_init__(self):
        taus = tuple(int(t) for t in self.timestep_subsequence)
        if len(taus) < 1:
            raise ConfigurationError("timestep subsequence is empty")
        if any(taus[i] >= taus[i + 1] for i in range(len(taus) - 1)):
            raise ConfigurationError("timestep subsequence must be strictly increasing")
        if taus[0] < 1:
            raise ConfigurationError("timesteps must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")
        object.__setattr__(self, "timestep_subsequence", taus)

    @property
    def K(self) -> int:
        return len(self.timestep_subsequence)

    @classmethod
    def uniform(cls, K: int, T: int, eta: float = 0.0) -> "SamplerConfig":
        """K uniformly spaced timesteps ending exactly at T."""
        if not (1 <= K <= T):
            raise ConfigurationError(f"need 1 <= K <= T, got K={K}, T={T}")
        taus = tuple((i * T) // K for i in range(1, K + 1))
        return cls(timestep_subsequence=taus, eta=eta)


def _match_shape(value: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return value.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward sample sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t may be an int or a per-batch-element long tensor; t = 0 returns z0.
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != signal {tuple(z0.shape)}")
    t_arr = torch.as_tensor(t, dtype=torch.long)
    if (t_arr < 0).any() or (t_arr > schedule.T).any():
        raise ParameterError(f"timestep outside [0, {schedule.T}]")
    abar = schedule.alpha_bars_tensor(z0.dtype)[t_arr]
    if t_arr.ndim > 0:
        abar = _match_shape(abar, z0)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def ldm_loss(
    z0: torch.Tensor,
    cond: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    model,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Mean squared error between the injected noise and the model's estimate
    of it on the forward-corrupted latent."""
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat = model(z_t, t, cond)
    return torch.mean((eps - eps_hat) ** 2)


def ddim_step(
    z_t: torch.Tensor,
    t: int,
    t_prev: int,
    eps_hat: torch.Tensor,
    eta: float,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One implicit reverse step from timestep t to t_prev (< t).

    Reconstructs the clean-latent estimate from the predicted noise, then
    re-noises it to level t_prev. With eta = 0 the step is deterministic.
    """
    if t_prev >= t:
        raise ParameterError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if not (0.0 <= eta <= 1.0):
        raise ParameterError(f"eta must lie in [0, 1], got {eta}")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)

    x0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = 0.0
    if eta > 0.0 and t_prev > 0:
        sigma = (
            eta
            * math.sqrt((1.0 - ab_p) / (1.0 - ab_t))
            * math.sqrt(1.0 - ab_t / ab_p)
        )
    direction = math.sqrt(max(1.0 - ab_p - sigma**2, 0.0))
    out = math.sqrt(ab_p) * x0_hat + direction * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ParameterError("eta > 0 requires an explicit noise tensor")
        out = out + sigma * noise
    return out


def ddim_sample(
    cond: torch.Tensor,
    model,
    schedule: NoiseSchedule,
    K: int,
    eta: float = 0.0,
    seed: int = 0,
    sampler: SamplerConfig | None = None,
) -> torch.Tensor:
    """Run the reverse pass: start from seeded Gaussian noise at level T and
    walk the K-step subsequence down to 0, conditioning every noise
    prediction on `cond`.

    cond may be (C, h, w) or batched (B, C, h, w); the result matches.
    """
    cfg = sampler or SamplerConfig.uniform(K, schedule.T, eta)
    if cfg.timestep_subsequence[-1] != schedule.T:
        raise ConfigurationError("timestep subsequence must end at T")
    single = cond.ndim == 3
    batch = cond[None] if single else cond

    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(batch.shape, generator=gen, dtype=batch.dtype)

    taus = list(cfg.timestep_subsequence)
    steps = list(zip(reversed(taus), reversed([0] + taus[:-1])))
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            for t, t_prev in steps:
                t_batch = torch.full((batch.shape[0],), t, dtype=torch.long)
                eps_hat = model(z, t_batch, batch)
                noise = None
                if cfg.eta > 0.0 and t_prev > 0:
                    noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
                z = ddim_step(z, t, t_prev, eps_hat, cfg.eta, schedule, noise)
    finally:
        if hasattr(model, "train"):
            model.train(was_training)
    return z[0] if single else z
