"""Shared network building blocks: sinusoidal timestep embeddings, multi-head
scaled-dot-product attention, residual blocks with optional timestep
conditioning, and resolution-changing layers."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ParameterError, ShapeError


def group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: [sin(t/10000^(2i/dim)) ..., cos(...) ...] for
    i = 0 .. dim/2 - 1. Accepts an int or a 1-D tensor of timesteps."""
    if dim < 2 or dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even and >= 2, got {dim}")
    if not torch.is_tensor(t):
        t = torch.as_tensor(t)
    if (t < 0).any():
        raise ParameterError("timesteps must be non-negative")
    scalar = t.ndim == 0
    t = t.reshape(-1).to(torch.float64)
    half = dim // 2
    exponents = 2.0 * torch.arange(half, dtype=torch.float64) / dim
    angles = t[:, None] / torch.pow(torch.tensor(10000.0, dtype=torch.float64), exponents)[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return emb[0] if scalar else emb


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """Multi-head scaled-dot-product attention over token matrices.

    q has shape (..., n_q, d), k and v (..., n_kv, d); d must divide by heads
    and d_k = d / heads scales the scores. Output shape matches v's feature
    layout with n_q tokens.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError("q, k, v must share the feature dimension")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("k and v must have the same token count")
    if heads < 1 or d % heads != 0:
        raise ConfigurationError(f"feature dim {d} not divisible by heads {heads}")
    d_k = d // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, d_k).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(d_k)
    out = torch.softmax(scores, dim=-1) @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-1], d)


class SelfAttention2d(nn.Module):
    """Residual self-attention over the spatial positions of a feature map."""

    def __init__(self, channels: int, head_dim: int = 32):
        super().__init__()
        if channels % head_dim != 0:
            raise ConfigurationError(
                f"channels {channels} not divisible by head_dim {head_dim}"
            )
        self.heads = channels // head_dim
        self.norm = group_norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        tokens = lambda z: z.reshape(b, c, h * w).transpose(1, 2)
        out = attention(tokens(q), tokens(k), tokens(v), heads=self.heads)
        out = out.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(out)


class ResidualBlock(nn.Module):
    """Two-convolution residual block; optionally injects a learned affine
    projection of the timestep embedding between the convolutions."""

    def __init__(self, in_channels: int, out_channels: int, dropout: float = 0.0, time_dim: int | None = None):
        super().__init__()
        self.norm1 = group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels) if time_dim else None
        self.norm2 = group_norm(out_channels)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x, t_emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            if t_emb is None:
                raise ParameterError("block built with time conditioning needs t_emb")
            h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
