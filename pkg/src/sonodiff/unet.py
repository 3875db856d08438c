"""Attention-equipped U-Net that predicts the noise added to a latent grid,
given the timestep and a condition latent of the same spatial shape.

Conditioning is channel concatenation at the input: the condition latent is
spatially aligned with the noisy latent, so no cross-attention is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    Downsample,
    ResidualBlock,
    SelfAttention2d,
    Upsample,
    group_norm,
    timestep_embedding,
)
from .exceptions import ConfigurationError, ParameterError, ShapeError


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 2, 4)
    attention_head_dim: int = 32
    dropout: float = 0.1
    attention_levels: frozenset = frozenset({2, 3})
    bottleneck_attention: bool = True
    latent_channels: int = 3
    time_embed_dim: int | None = None

    def __post_init__(self):
        if len(self.channel_multipliers) < 1:
            raise ConfigurationError("need at least one channel multiplier")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.base_channels < 2 or self.base_channels % 2 != 0:
            raise ConfigurationError("base_channels must be even and >= 2")
        levels = frozenset(self.attention_levels)
        object.__setattr__(self, "attention_levels", levels)
        for lvl in levels:
            if not (0 <= lvl < len(self.channel_multipliers)):
                raise ConfigurationError(f"attention level {lvl} out of range")
            ch = self.base_channels * self.channel_multipliers[lvl]
            if ch % self.attention_head_dim != 0:
                raise ConfigurationError(
                    f"channels {ch} at attention level {lvl} not divisible by "
                    f"head dim {self.attention_head_dim}"
                )
        if self.bottleneck_attention:
            ch = self.base_channels * self.channel_multipliers[-1]
            if ch % self.attention_head_dim != 0:
                raise ConfigurationError(
                    f"bottleneck channels {ch} not divisible by head dim "
                    f"{self.attention_head_dim}"
                )
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_channels)


class NoisePredictor(nn.Module):
    """U-Net over latent grids: two residual blocks per level on the way down,
    three on the way up, attention inserted at the configured levels and in
    the bottleneck."""

    NUM_RES_BLOCKS = 2

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        mults = cfg.channel_multipliers
        chans = [cfg.base_channels * m for m in mults]
        time_dim = cfg.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )

        self.stem = nn.Conv2d(2 * cfg.latent_channels, chans[0], 3, padding=1)

        def attn(level_ch):
            return SelfAttention2d(level_ch, cfg.attention_head_dim)

        # Down path. Track the channel count of every skip connection.
        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chans = [chans[0]]
        prev = chans[0]
        for level, ch in enumerate(chans):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(self.NUM_RES_BLOCKS):
                blocks.append(ResidualBlock(prev, ch, cfg.dropout, time_dim))
                attns.append(attn(ch) if level in cfg.attention_levels else nn.Identity())
                prev = ch
                skip_chans.append(ch)
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            if level < len(chans) - 1:
                self.downsamples.append(Downsample(ch))
                skip_chans.append(ch)
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = ResidualBlock(prev, prev, cfg.dropout, time_dim)
        self.mid_attn = attn(prev) if cfg.bottleneck_attention else nn.Identity()
        self.mid_block2 = ResidualBlock(prev, prev, cfg.dropout, time_dim)

        # Up path mirrors the down path, consuming one skip per block.
        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(chans))):
            ch = chans[level]
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(self.NUM_RES_BLOCKS + 1):
                blocks.append(ResidualBlock(prev + skip_chans.pop(), ch, cfg.dropout, time_dim))
                attns.append(attn(ch) if level in cfg.attention_levels else nn.Identity())
                prev = ch
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            self.upsamples.append(Upsample(ch) if level > 0 else nn.Identity())

        self.out_norm = group_norm(prev)
        self.out_conv = nn.Conv2d(prev, cfg.latent_channels, 3, padding=1)

    def forward(self, z_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if z_t.shape != cond.shape:
            raise ShapeError(
                f"noisy latent {tuple(z_t.shape)} and condition {tuple(cond.shape)} differ"
            )
        if not torch.is_tensor(t):
            t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        dtype = self.out_conv.weight.dtype
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(dtype))

        h = self.stem(torch.cat([z_t, cond], dim=1))
        skips = [h]
        for level in range(len(self.down_blocks)):
            for block, attn in zip(self.down_blocks[level], self.down_attns[level]):
                h = attn(block(h, t_emb))
                skips.append(h)
            if not isinstance(self.downsamples[level], nn.Identity):
                h = self.downsamples[level](h)
                skips.append(h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, t_emb)), t_emb)

        for stage in range(len(self.up_blocks)):
            for block, attn in zip(self.up_blocks[stage], self.up_attns[stage]):
                h = attn(block(torch.cat([h, skips.pop()], dim=1), t_emb))
            h = self.upsamples[stage](h)

        return self.out_conv(F.silu(self.out_norm(h)))


def predict_noise(z_t: torch.Tensor, t, cond: torch.Tensor, model: NoisePredictor) -> torch.Tensor:
    """Evaluation-mode single-call wrapper: deterministic (dropout off)."""
    if not torch.is_tensor(t):
        t = torch.as_tensor(t)
    if (t < 1).any():
        raise ParameterError("timestep must be >= 1 at prediction time")
    single = z_t.ndim == 3
    if single:
        z_t, cond = z_t[None], cond[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            eps = model(z_t, t, cond)
    finally:
        model.train(was_training)
    return eps[0] if single else eps
