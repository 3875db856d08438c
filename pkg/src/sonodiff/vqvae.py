"""Vector-quantized autoencoder: the clean-image encoder (frozen after stage
one), the condition encoder for contaminated images (same architecture, kept
trainable), the codebook quantizer with straight-through gradients, and the
decoder.

Encoders downsample by stride-2 once per multiplier step; the default
three-multiplier config therefore maps HxW images to (H/4)x(W/4) latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import Downsample, ResidualBlock, SelfAttention2d, Upsample, group_norm
from .exceptions import ConfigurationError, ParameterError, ShapeError
from .imaging import UltrasoundImage


@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4)
    latent_dim: int = 3
    bottleneck_attention: bool = True
    attention_head_dim: int = 32

    def __post_init__(self):
        if len(self.channel_multipliers) < 2:
            raise ConfigurationError("need at least 2 channel multipliers")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if self.bottleneck_attention:
            bottleneck = self.base_channels * self.channel_multipliers[-1]
            if bottleneck % self.attention_head_dim != 0:
                raise ConfigurationError(
                    f"bottleneck channels {bottleneck} not divisible by "
                    f"attention head dim {self.attention_head_dim}"
                )

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)


class Encoder(nn.Module):
    """Stride-2 downsampling stack ending in an attention-enabled bottleneck."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        mults = cfg.channel_multipliers
        chans = [cfg.base_channels * m for m in mults]
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1)
        stages = []
        prev = chans[0]
        for ch in chans[:-1]:
            stages.append(ResidualBlock(prev, ch))
            stages.append(ResidualBlock(ch, ch))
            stages.append(Downsample(ch))
            prev = ch
        self.stages = nn.ModuleList(stages)
        bottleneck: list[nn.Module] = [ResidualBlock(prev, chans[-1])]
        if cfg.bottleneck_attention:
            bottleneck.append(SelfAttention2d(chans[-1], cfg.attention_head_dim))
        bottleneck.append(ResidualBlock(chans[-1], chans[-1]))
        self.bottleneck = nn.ModuleList(bottleneck)
        self.out_norm = group_norm(chans[-1])
        self.out_conv = nn.Conv2d(chans[-1], cfg.latent_dim, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        for block in self.bottleneck:
            h = block(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class Decoder(nn.Module):
    """Mirror of the encoder: bottleneck, then nearest-upsample stages."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        mults = cfg.channel_multipliers
        chans = [cfg.base_channels * m for m in mults]
        self.stem = nn.Conv2d(cfg.latent_dim, chans[-1], 3, padding=1)
        bottleneck: list[nn.Module] = [ResidualBlock(chans[-1], chans[-1])]
        if cfg.bottleneck_attention:
            bottleneck.append(SelfAttention2d(chans[-1], cfg.attention_head_dim))
        bottleneck.append(ResidualBlock(chans[-1], chans[-1]))
        self.bottleneck = nn.ModuleList(bottleneck)
        stages = []
        prev = chans[-1]
        for ch in reversed(chans[:-1]):
            stages.append(Upsample(prev))
            stages.append(ResidualBlock(prev, ch))
            stages.append(ResidualBlock(ch, ch))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.out_norm = group_norm(prev)
        self.out_conv = nn.Conv2d(prev, 1, 3, padding=1)

    def forward(self, z):
        h = self.stem(z)
        for block in self.bottleneck:
            h = block(h)
        for stage in self.stages:
            h = stage(h)
        return self.out_conv(F.silu(self.out_norm(h)))


@dataclass
class QuantizedLatent:
    """Codebook assignment of a latent grid: integer indices plus the exact
    codebook rows they select."""

    indices: torch.Tensor  # (..., h, w) long
    embedded: torch.Tensor  # (..., dim, h, w)


class VectorQuantizer(nn.Module):
    """Nearest-codebook-entry quantizer with straight-through gradients.

    Ties break toward the lowest index. Entries unused for `dead_steps`
    consecutive observed steps can be re-seeded from encoder outputs to keep
    small codebooks alive.
    """

    def __init__(self, size: int = 512, dim: int = 3, dead_steps: int = 100):
        super().__init__()
        if size < 1:
            raise ConfigurationError("codebook size must be >= 1")
        self.size = size
        self.dim = dim
        self.dead_steps = dead_steps
        self.embedding = nn.Embedding(size, dim)
        nn.init.uniform_(self.embedding.weight, -1.0 / size, 1.0 / size)
        self.register_buffer("steps_since_use", torch.zeros(size, dtype=torch.long))

    def nearest_indices(self, flat: torch.Tensor) -> torch.Tensor:
        weight = self.embedding.weight
        out = torch.empty(flat.shape[0], dtype=torch.long, device=flat.device)
        chunk = max(1, (1 << 22) // max(1, self.size))
        for start in range(0, flat.shape[0], chunk):
            block = flat[start : start + chunk]
            d = ((block[:, None, :] - weight[None, :, :]) ** 2).sum(-1)
            out[start : start + chunk] = d.argmin(dim=1)
        return out

    def forward(self, z_e: torch.Tensor):
        """Quantize (B, C, H, W) latents.

        Returns (z_q_st, indices, z_q): the straight-through tensor fed to the
        decoder, the per-position codebook indices, and the raw embedded rows
        (which carry gradients into the codebook).
        """
        if z_e.shape[1] != self.dim:
            raise ShapeError(f"latent channels {z_e.shape[1]} != codebook dim {self.dim}")
        b, c, h, w = z_e.shape
        flat = z_e.permute(0, 2, 3, 1).reshape(-1, c)
        idx = self.nearest_indices(flat)
        z_q = self.embedding(idx).reshape(b, h, w, c).permute(0, 3, 1, 2)
        z_q_st = z_e + (z_q - z_e).detach()
        return z_q_st, idx.reshape(b, h, w), z_q

    def observe_usage(self, indices: torch.Tensor) -> None:
        self.steps_since_use += 1
        self.steps_since_use[indices.reshape(-1).unique()] = 0

    def reseed_dead_entries(self, z_e: torch.Tensor, generator: torch.Generator | None = None) -> int:
        """Replace entries unused for dead_steps with random encoder outputs."""
        dead = self.steps_since_use >= self.dead_steps
        n_dead = int(dead.sum())
        if n_dead == 0:
            return 0
        flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, self.dim)
        pick = torch.randint(0, flat.shape[0], (n_dead,), generator=generator)
        with torch.no_grad():
            self.embedding.weight[dead] = flat[pick]
        self.steps_since_use[dead] = 0
        return n_dead

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return self.embedding(indices)


class Discriminator(nn.Module):
    """Four stride-2 convolutions to a patch logit map, for the optional
    adversarial reconstruction term (hinge loss)."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 4, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


@dataclass(frozen=True)
class VqLossConfig:
    beta_commit: float = 0.25
    lambda_perceptual: float = 0.1
    lambda_adversarial: float = 0.0
    perceptual_sigma: float = 1.0

    def __post_init__(self):
        for name in ("beta_commit", "lambda_perceptual", "lambda_adversarial", "perceptual_sigma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")


def _gaussian_kernel1d(sigma: float, radius: int, dtype, device) -> torch.Tensor:
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _blurred_gradient_magnitude(x: torch.Tensor, sigma: float) -> torch.Tensor:
    gx = x[:, :, :, 2:] - x[:, :, :, :-2]
    gy = x[:, :, 2:, :] - x[:, :, :-2, :]
    mag = torch.sqrt(gx[:, :, 1:-1, :] ** 2 + gy[:, :, :, 1:-1] ** 2 + 1e-12)
    radius = max(1, int(round(2.0 * sigma)))
    k = _gaussian_kernel1d(sigma, radius, x.dtype, x.device)
    mag = F.conv2d(mag, k.reshape(1, 1, 1, -1), padding=(0, radius))
    mag = F.conv2d(mag, k.reshape(1, 1, -1, 1), padding=(radius, 0))
    return mag


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """MSE between Gaussian-blurred gradient-magnitude maps of two images."""
    return F.mse_loss(
        _blurred_gradient_magnitude(x_hat, sigma), _blurred_gradient_magnitude(x, sigma)
    )


def vqvae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    z_e: torch.Tensor,
    z_q: torch.Tensor,
    cfg: VqLossConfig,
    adversarial_logits: torch.Tensor | None = None,
):
    """Total autoencoder loss plus its weighted term breakdown.

    All terms use mean reduction. The breakdown entries already include their
    weights, so they sum to the total.
    """
    if x.shape != x_hat.shape or z_e.shape != z_q.shape:
        raise ShapeError("loss inputs have mismatched shapes")
    terms = {
        "reconstruction": F.mse_loss(x_hat, x),
        "codebook": F.mse_loss(z_q, z_e.detach()),
        "commitment": cfg.beta_commit * F.mse_loss(z_e, z_q.detach()),
    }
    if cfg.lambda_perceptual > 0:
        terms["perceptual"] = cfg.lambda_perceptual * perceptual_loss(
            x, x_hat, cfg.perceptual_sigma
        )
    else:
        terms["perceptual"] = torch.zeros((), dtype=x.dtype, device=x.device)
    if cfg.lambda_adversarial > 0 and adversarial_logits is not None:
        terms["adversarial"] = -cfg.lambda_adversarial * adversarial_logits.mean()
    else:
        terms["adversarial"] = torch.zeros((), dtype=x.dtype, device=x.device)
    total = sum(terms.values())
    return total, terms


class VqVae(nn.Module):
    """Encoder + quantizer + decoder bundle used for stage-one training."""

    def __init__(self, cfg: EncoderConfig, codebook_size: int = 512):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.quantizer = VectorQuantizer(codebook_size, cfg.latent_dim)
        self.decoder = Decoder(cfg)

    def forward(self, x):
        z_e = self.encoder(x)
        z_q_st, indices, z_q = self.quantizer(z_e)
        x_hat = self.decoder(z_q_st)
        return x_hat, z_e, z_q_st, indices, z_q


# ---------------------------------------------------------------------------
# Single-image functional surface


def _image_to_batch(image: UltrasoundImage, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.from_numpy(image.pixels).to(dtype)[None, None]


def encode(image: UltrasoundImage, encoder: Encoder) -> torch.Tensor:
    """Encode one image to its (latent_dim, H/f, W/f) latent grid."""
    f = encoder.cfg.downsample_factor
    if image.height % f or image.width % f:
        raise ShapeError(
            f"image {image.shape} not divisible by downsample factor {f}"
        )
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            z = encoder(_image_to_batch(image, encoder))
    finally:
        encoder.train(was_training)
    return z[0]


def encode_condition(image: UltrasoundImage, condition_encoder: Encoder) -> torch.Tensor:
    """Encode a contaminated image with the condition encoder; the result
    stays continuous (it is never quantized)."""
    return encode(image, condition_encoder)


def quantize(z: torch.Tensor, quantizer: VectorQuantizer) -> QuantizedLatent:
    """Snap a (C, h, w) or (B, C, h, w) latent to its nearest codebook rows."""
    single = z.ndim == 3
    batch = z[None] if single else z
    with torch.no_grad():
        _, indices, z_q = quantizer(batch.to(quantizer.embedding.weight.dtype))
    if single:
        return QuantizedLatent(indices=indices[0], embedded=z_q[0])
    return QuantizedLatent(indices=indices, embedded=z_q)


def decode(latent, decoder: Decoder) -> UltrasoundImage:
    """Decode a (C, h, w) latent grid or a QuantizedLatent to an image with
    pixels clamped to [0, 1]."""
    z = latent.embedded if isinstance(latent, QuantizedLatent) else latent
    if z.ndim != 3:
        raise ShapeError(f"expected a (C, h, w) latent, got shape {tuple(z.shape)}")
    if z.shape[0] != decoder.cfg.latent_dim:
        raise ShapeError(
            f"latent channels {z.shape[0]} != configured {decoder.cfg.latent_dim}"
        )
    was_training = decoder.training
    decoder.eval()
    try:
        with torch.no_grad():
            x = decoder(z[None].to(next(decoder.parameters()).dtype))
    finally:
        decoder.train(was_training)
    px = x[0, 0].clamp(0.0, 1.0).cpu().numpy().astype(np.float32)
    return UltrasoundImage(px)
