"""Two-stage training: the autoencoder on clean frames first, then the
condition encoder and noise predictor on pairs with the autoencoder frozen.

Both stages keep the checkpoint with the best validation score (stage one:
reconstruction error; stage two: mean SSIM of a short K=5 denoising run on a
fixed validation subsample). A non-finite loss aborts the run but saves the
last good parameters first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .config import RunConfig
from .diffusion import build_schedule, ldm_loss
from .exceptions import DataError, TrainingDivergenceError
from .imaging import ImagePair, UltrasoundImage, load_any, load_manifest_pairs, read_manifest
from .metrics import ssim
from .unet import NoisePredictor
from .vqvae import VqVae, vqvae_loss


@dataclass
class TrainResult:
    checkpoint_path: str
    best_step: int
    best_metric: float
    history: list = field(default_factory=list)  # (step, validation metric)
    final_train_loss: float = float("nan")


# ---------------------------------------------------------------------------
# Augmentation


def _transform(pixels: np.ndarray, flips: tuple[bool, bool], quarter_turns: int) -> np.ndarray:
    out = pixels
    if flips[0]:
        out = np.flip(out, axis=1)
    if flips[1]:
        out = np.flip(out, axis=0)
    if quarter_turns:
        out = np.rot90(out, k=quarter_turns)
    return np.ascontiguousarray(out)


def _draw_transform(rng: np.random.Generator, flip: bool, rotation: bool):
    flips = (bool(rng.integers(2)), bool(rng.integers(2))) if flip else (False, False)
    turns = int(rng.integers(4)) if rotation else 0
    return flips, turns


def augment_pair(pair: ImagePair, seed: int, flip: bool = True, rotation: bool = True) -> ImagePair:
    """Apply one random flip/rotation draw identically to both frames."""
    rng = np.random.default_rng(seed)
    flips, turns = _draw_transform(rng, flip, rotation)
    return ImagePair(
        contaminated=UltrasoundImage(_transform(pair.contaminated.pixels, flips, turns)),
        clean=UltrasoundImage(_transform(pair.clean.pixels, flips, turns)),
        modality=pair.modality,
        power_level=pair.power_level,
        tissue_class=pair.tissue_class,
        group_id=pair.group_id,
    )


# ---------------------------------------------------------------------------
# Data access


def _manifest_path(cfg: RunConfig, split: str) -> Path:
    path = Path(cfg.dataset_dir) / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    return path


def _load_clean_images(cfg: RunConfig, split: str) -> list[np.ndarray]:
    path = _manifest_path(cfg, split)
    root = path.parent
    seen: set[str] = set()
    images: list[np.ndarray] = []
    for rec in read_manifest(path):
        if rec["path_clean"] in seen:
            continue
        seen.add(rec["path_clean"])
        images.append(load_any(root / rec["path_clean"]).pixels)
    if not images:
        raise DataError(f"no clean images in {path}")
    return images


def _load_pairs(cfg: RunConfig, split: str) -> list[ImagePair]:
    pairs = load_manifest_pairs(_manifest_path(cfg, split))
    if not pairs:
        raise DataError(f"no pairs in split {split!r}")
    return pairs


def _image_batch(
    images: list[np.ndarray],
    batch_size: int,
    rng: np.random.Generator,
    flip: bool,
    rotation: bool,
    dtype: torch.dtype,
) -> torch.Tensor:
    picks = rng.integers(0, len(images), size=batch_size)
    out = []
    for i in picks:
        flips, turns = _draw_transform(rng, flip, rotation)
        out.append(torch.from_numpy(_transform(images[i], flips, turns)))
    return torch.stack(out).to(dtype)[:, None]


def _pair_batch(
    pairs: list[ImagePair],
    batch_size: int,
    rng: np.random.Generator,
    flip: bool,
    rotation: bool,
    dtype: torch.dtype,
) -> tuple[torch.Tensor, torch.Tensor]:
    picks = rng.integers(0, len(pairs), size=batch_size)
    cont, clean = [], []
    for i in picks:
        flips, turns = _draw_transform(rng, flip, rotation)
        cont.append(torch.from_numpy(_transform(pairs[i].contaminated.pixels, flips, turns)))
        clean.append(torch.from_numpy(_transform(pairs[i].clean.pixels, flips, turns)))
    return torch.stack(cont).to(dtype)[:, None], torch.stack(clean).to(dtype)[:, None]


def _snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


# ---------------------------------------------------------------------------
# Stage one: autoencoder on clean frames


def train_stage1(cfg: RunConfig, out_dir) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "stage1.ildc"

    torch.manual_seed(cfg.seed)
    dtype = torch.float64 if cfg.precision == "double" else torch.float32
    train_images = _load_clean_images(cfg, "train")
    val_images = _load_clean_images(cfg, "validation")[:16]

    model = VqVae(cfg.vqvae.encoder, cfg.vqvae.codebook_size).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.stage1_lr)
    rng = np.random.default_rng(cfg.seed)
    reseed_gen = torch.Generator().manual_seed(cfg.seed + 1)

    val_batch = torch.stack([torch.from_numpy(im) for im in val_images]).to(dtype)[:, None]

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            x_hat, _, _, _, _ = model(val_batch)
            err = torch.mean((x_hat.clamp(0, 1) - val_batch) ** 2).item()
        model.train()
        return err

    def save(state: dict, step: int, metric: float | None) -> None:
        tensors = {}
        for key, value in state.items():
            for prefix, attr in (("xi.", "encoder."), ("codebook.", "quantizer."), ("decoder.", "decoder.")):
                if key.startswith(attr):
                    tensors[prefix + key[len(attr):]] = value
        tensors["meta.latent_scale"] = np.asarray(latent_scale_holder[0], dtype=np.float64)
        frozen = {n for n in tensors if n.startswith(("xi.", "decoder."))}
        pipeline.write_checkpoint(
            ckpt_path, tensors, cfg, step=step, validation_metric=metric,
            frozen=frozen, stage="vqvae",
        )

    latent_scale_holder = [1.0]
    best_state = _snapshot(model)
    best_step, best_metric = 0, float("inf")
    history: list[tuple[int, float]] = []
    model.train()
    last_loss = float("nan")

    for step in range(1, cfg.stage1_steps + 1):
        batch = _image_batch(
            train_images, cfg.batch_size, rng, cfg.augment_flip, cfg.augment_rotation, dtype
        )
        x_hat, z_e, _, indices, z_q = model(batch)
        loss, _ = vqvae_loss(batch, x_hat, z_e, z_q, cfg.vqvae.loss)
        if not torch.isfinite(loss):
            save(best_state, best_step, None)
            raise TrainingDivergenceError(
                f"stage-1 loss became non-finite at step {step}; "
                f"last good checkpoint saved to {ckpt_path}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        last_loss = float(loss.item())
        model.quantizer.observe_usage(indices)
        model.quantizer.reseed_dead_entries(z_e, reseed_gen)

        if step % cfg.validation_interval == 0 or step == cfg.stage1_steps:
            metric = validate()
            history.append((step, metric))
            if metric < best_metric:
                best_metric, best_step = metric, step
                best_state = _snapshot(model)

    # Latent scale: normalize encoder outputs to roughly unit spread so the
    # diffusion noise schedule operates at the intended signal-to-noise.
    model.load_state_dict(best_state)
    model.eval()
    with torch.no_grad():
        sample = torch.stack(
            [torch.from_numpy(im) for im in train_images[:64]]
        ).to(dtype)[:, None]
        z = model.encoder(sample)
        std = float(z.std().item())
    latent_scale_holder[0] = 1.0 / max(std, 1e-8)

    save(best_state, best_step, best_metric)
    return TrainResult(
        checkpoint_path=str(ckpt_path),
        best_step=best_step,
        best_metric=best_metric,
        history=history,
        final_train_loss=last_loss,
    )


# ---------------------------------------------------------------------------
# Stage two: condition encoder + noise predictor, autoencoder frozen


def train_stage2(cfg: RunConfig, stage1_checkpoint, out_dir) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "stage2.ildc"

    torch.manual_seed(cfg.seed + 2)
    dtype = torch.float64 if cfg.precision == "double" else torch.float32
    train_pairs = _load_pairs(cfg, "train")
    val_pairs = _load_pairs(cfg, "validation")[: cfg.validation_pairs]

    bundle = pipeline.load_bundle(stage1_checkpoint, cfg, require_full=False)
    vqvae = bundle.vqvae.to(dtype)
    scale = bundle.latent_scale
    vqvae.requires_grad_(False)
    vqvae.eval()

    psi = bundle.psi.to(dtype)
    psi.load_state_dict(vqvae.encoder.state_dict())  # warm start from xi
    unet = bundle.unet.to(dtype)
    schedule = bundle.schedule

    optimizer = torch.optim.Adam(
        list(psi.parameters()) + list(unet.parameters()), lr=cfg.stage2_lr
    )
    rng = np.random.default_rng(cfg.seed + 3)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 4)

    def validate() -> float:
        psi.eval()
        unet.eval()
        denoised = pipeline.denoise_pairs_quick(
            [p.contaminated for p in val_pairs], vqvae, psi, unet, schedule, scale, K=5, seed=cfg.seed
        )
        psi.train()
        unet.train()
        scores = [ssim(d, p.clean) for d, p in zip(denoised, val_pairs)]
        return float(np.mean(scores))

    def save(psi_state, unet_state, step, metric) -> None:
        tensors = {}
        for key, value in vqvae.state_dict().items():
            for prefix, attr in (("xi.", "encoder."), ("codebook.", "quantizer."), ("decoder.", "decoder.")):
                if key.startswith(attr):
                    tensors[prefix + key[len(attr):]] = value
        tensors.update({f"psi.{k}": v for k, v in psi_state.items()})
        tensors.update({f"unet.{k}": v for k, v in unet_state.items()})
        tensors["meta.latent_scale"] = np.asarray(scale, dtype=np.float64)
        frozen = {n for n in tensors if n.startswith(("xi.", "decoder."))}
        pipeline.write_checkpoint(
            ckpt_path, tensors, cfg, step=step, validation_metric=metric,
            frozen=frozen, stage="full",
        )

    best_psi, best_unet = _snapshot(psi), _snapshot(unet)
    best_step, best_metric = 0, -float("inf")
    history: list[tuple[int, float]] = []
    psi.train()
    unet.train()
    last_loss = float("nan")

    for step in range(1, cfg.stage2_steps + 1):
        cont, clean = _pair_batch(
            train_pairs, cfg.batch_size, rng, cfg.augment_flip, cfg.augment_rotation, dtype
        )
        with torch.no_grad():
            z0 = vqvae.encoder(clean) * scale
        cond = psi(cont) * scale
        t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=noise_gen)
        eps = torch.randn(z0.shape, generator=noise_gen, dtype=dtype)
        loss = ldm_loss(z0, cond, t, eps, unet, schedule)
        if not torch.isfinite(loss):
            save(best_psi, best_unet, best_step, None)
            raise TrainingDivergenceError(
                f"stage-2 loss became non-finite at step {step}; "
                f"last good checkpoint saved to {ckpt_path}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        last_loss = float(loss.item())

        if step % cfg.validation_interval == 0 or step == cfg.stage2_steps:
            metric = validate()
            history.append((step, metric))
            if metric > best_metric:
                best_metric, best_step = metric, step
                best_psi, best_unet = _snapshot(psi), _snapshot(unet)

    save(best_psi, best_unet, best_step, best_metric)
    return TrainResult(
        checkpoint_path=str(ckpt_path),
        best_step=best_step,
        best_metric=best_metric,
        history=history,
        final_train_loss=last_loss,
    )
