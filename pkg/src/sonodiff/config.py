"""Experiment configuration: nested dataclasses, JSON round-trip with keys
named after the fields, and a fingerprint over the architecture-defining
subset used to validate checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigurationError
from .unet import UNetConfig
from .vqvae import EncoderConfig, VqLossConfig


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0155

    def __post_init__(self):
        if self.timesteps < 1:
            raise ConfigurationError("timesteps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigurationError("need 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class VqVaeConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    codebook_size: int = 512
    loss: VqLossConfig = field(default_factory=VqLossConfig)

    def __post_init__(self):
        if self.codebook_size < 1:
            raise ConfigurationError("codebook_size must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or inference run needs, in one place."""

    dataset_dir: str = "data"
    image_size: int = 64
    vqvae: VqVaeConfig = field(default_factory=VqVaeConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stage1_steps: int = 1500
    stage1_lr: float = 2e-3
    stage2_steps: int = 3000
    stage2_lr: float = 1e-3
    batch_size: int = 8
    augment_flip: bool = True
    augment_rotation: bool = True
    sampler_ks: tuple = (5, 30)
    validation_interval: int = 100
    validation_pairs: int = 6
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ConfigurationError("step counts must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.image_size < 16 or self.image_size % 4:
            raise ConfigurationError("image_size must be >= 16 and divisible by 4")
        if self.precision not in ("single", "double"):
            raise ConfigurationError("precision must be 'single' or 'double'")
        if self.validation_interval < 1 or self.validation_pairs < 1:
            raise ConfigurationError("validation settings must be >= 1")
        if any(k < 1 for k in self.sampler_ks):
            raise ConfigurationError("sampler K presets must be >= 1")
        if self.unet.latent_channels != self.vqvae.encoder.latent_dim:
            raise ConfigurationError(
                "unet.latent_channels must equal vqvae.encoder.latent_dim"
            )

    # -- presets ---------------------------------------------------------

    @classmethod
    def desk_preset(cls, dataset_dir: str = "data") -> "RunConfig":
        """Small configuration that trains in minutes on a CPU."""
        return cls(
            dataset_dir=dataset_dir,
            image_size=64,
            vqvae=VqVaeConfig(
                encoder=EncoderConfig(base_channels=32, channel_multipliers=(1, 2, 4)),
                codebook_size=512,
            ),
            unet=UNetConfig(
                base_channels=64,
                channel_multipliers=(1, 2, 2, 4),
                attention_head_dim=32,
                dropout=0.1,
                attention_levels=frozenset({2, 3}),
            ),
        )

    @classmethod
    def paper_preset(cls, dataset_dir: str = "data") -> "RunConfig":
        """Full-scale hyperparameters as published; compute-heavy."""
        return cls(
            dataset_dir=dataset_dir,
            image_size=512,
            vqvae=VqVaeConfig(
                encoder=EncoderConfig(base_channels=64, channel_multipliers=(1, 2, 4)),
                codebook_size=8192,
            ),
            unet=UNetConfig(
                base_channels=160,
                channel_multipliers=(1, 2, 2, 4),
                attention_head_dim=32,
                dropout=0.3,
                attention_levels=frozenset({2, 3}),
            ),
            stage1_steps=1500,
            stage1_lr=4.5e-6,
            stage2_steps=5500,
            stage2_lr=1.0e-6,
            batch_size=3,
        )

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, (frozenset, set)):
                return sorted(obj)
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return convert(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        try:
            if "vqvae" in data:
                vq = dict(data["vqvae"])
                if "encoder" in vq:
                    enc = dict(vq["encoder"])
                    if "channel_multipliers" in enc:
                        enc["channel_multipliers"] = tuple(enc["channel_multipliers"])
                    vq["encoder"] = EncoderConfig(**enc)
                if "loss" in vq:
                    vq["loss"] = VqLossConfig(**vq["loss"])
                data["vqvae"] = VqVaeConfig(**vq)
            if "unet" in data:
                un = dict(data["unet"])
                if "channel_multipliers" in un:
                    un["channel_multipliers"] = tuple(un["channel_multipliers"])
                if "attention_levels" in un:
                    un["attention_levels"] = frozenset(un["attention_levels"])
                data["unet"] = UNetConfig(**un)
            if "schedule" in data:
                data["schedule"] = ScheduleConfig(**data["schedule"])
            if "sampler_ks" in data:
                data["sampler_ks"] = tuple(data["sampler_ks"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(f"unrecognized config key: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def fingerprint(self) -> str:
        """Hash of the model-defining fields. Checkpoints refuse to load into
        a config whose fingerprint differs (no silent shape coercion)."""
        d = self.to_dict()
        subset = {
            "image_size": d["image_size"],
            "vqvae": {"encoder": d["vqvae"]["encoder"], "codebook_size": d["vqvae"]["codebook_size"]},
            "unet": d["unet"],
            "schedule": d["schedule"],
        }
        blob = json.dumps(subset, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()
