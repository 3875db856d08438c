"""End-to-end plumbing: the trained-model bundle, checkpoint wiring, batched
denoising, the sampler timing benchmark, and the ablation grid."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, ScheduleConfig, VqVaeConfig
from .diffusion import NoiseSchedule, build_schedule, ddim_sample
from .exceptions import CheckpointError, ParameterError
from .imaging import UltrasoundImage, load_any, save_image, save_raw
from .metrics import MetricReport, evaluate_pairs
from .unet import NoisePredictor, UNetConfig
from .vqvae import Encoder, VqVae


@dataclass
class ModelBundle:
    """Everything denoising needs: the frozen autoencoder, the condition
    encoder, the noise predictor, the schedule, and the latent scale."""

    config: RunConfig
    vqvae: VqVae
    psi: Encoder
    unet: NoisePredictor
    schedule: NoiseSchedule
    latent_scale: float = 1.0


def build_bundle(config: RunConfig) -> ModelBundle:
    """Fresh, untrained modules matching the config."""
    torch.manual_seed(config.seed)
    return ModelBundle(
        config=config,
        vqvae=VqVae(config.vqvae.encoder, config.vqvae.codebook_size),
        psi=Encoder(config.vqvae.encoder),
        unet=NoisePredictor(config.unet),
        schedule=build_schedule(
            config.schedule.timesteps, config.schedule.beta_start, config.schedule.beta_end
        ),
        latent_scale=1.0,
    )


# ---------------------------------------------------------------------------
# Checkpoint wiring

_PREFIXES = ("xi.", "codebook.", "decoder.", "psi.", "unet.")


def write_checkpoint(path, tensors, config, *, step, validation_metric, frozen, stage):
    save_checkpoint(
        path,
        tensors,
        config=config,
        step=step,
        validation_metric=validation_metric,
        frozen=frozen,
        extra={"stage": stage},
    )


def bundle_tensors(bundle: ModelBundle) -> dict:
    """Flatten the bundle's parameters into checkpoint tensor names."""
    tensors = {}
    groups = (
        ("xi.", bundle.vqvae.encoder),
        ("codebook.", bundle.vqvae.quantizer),
        ("decoder.", bundle.vqvae.decoder),
        ("psi.", bundle.psi),
        ("unet.", bundle.unet),
    )
    for prefix, module in groups:
        for key, value in module.state_dict().items():
            tensors[prefix + key] = value
    tensors["meta.latent_scale"] = np.asarray(bundle.latent_scale, dtype=np.float64)
    return tensors


def save_bundle(path, bundle: ModelBundle, *, step=0, validation_metric=None, stage="full"):
    tensors = bundle_tensors(bundle)
    frozen = {n for n in tensors if n.startswith(("xi.", "decoder."))}
    write_checkpoint(
        path, tensors, bundle.config, step=step, validation_metric=validation_metric,
        frozen=frozen, stage=stage,
    )


def load_bundle(path, config: RunConfig | None = None, require_full: bool = True) -> ModelBundle:
    """Rebuild modules from a checkpoint. With a config supplied, its
    fingerprint must match; otherwise the embedded config is used."""
    ckpt = load_checkpoint(path, config=config)
    if config is None:
        if ckpt.config is None:
            raise CheckpointError(f"{path}: no embedded config; pass one explicitly")
        config = RunConfig.from_dict(ckpt.config)
    stage = ckpt.extra.get("stage", "full")
    if require_full and stage != "full":
        raise CheckpointError(
            f"{path}: contains a stage-one checkpoint; finish stage-two training first"
        )
    bundle = build_bundle(config)

    grouped: dict[str, dict[str, torch.Tensor]] = {p: {} for p in _PREFIXES}
    for name, arr in ckpt.tensors.items():
        for prefix in _PREFIXES:
            if name.startswith(prefix):
                grouped[prefix][name[len(prefix):]] = torch.from_numpy(arr)
                break
    modules = {
        "xi.": bundle.vqvae.encoder,
        "codebook.": bundle.vqvae.quantizer,
        "decoder.": bundle.vqvae.decoder,
        "psi.": bundle.psi,
        "unet.": bundle.unet,
    }
    for prefix, module in modules.items():
        if grouped[prefix]:
            try:
                module.load_state_dict(grouped[prefix])
            except RuntimeError as exc:
                raise CheckpointError(f"{path}: tensor layout mismatch under {prefix}: {exc}") from exc
    if "meta.latent_scale" in ckpt.tensors:
        bundle.latent_scale = float(ckpt.tensors["meta.latent_scale"])
    return bundle


# ---------------------------------------------------------------------------
# Denoising


def _to_batch(images: list[UltrasoundImage], dtype: torch.dtype) -> torch.Tensor:
    return torch.stack([torch.from_numpy(im.pixels) for im in images]).to(dtype)[:, None]


def denoise_pairs_quick(
    images: list[UltrasoundImage],
    vqvae: VqVae,
    psi: Encoder,
    unet: NoisePredictor,
    schedule: NoiseSchedule,
    latent_scale: float,
    K: int,
    eta: float = 0.0,
    seed: int = 0,
) -> list[UltrasoundImage]:
    """Batched condition-encode, sample, decode. Internal building block."""
    dtype = next(unet.parameters()).dtype
    batch = _to_batch(images, dtype)
    with torch.no_grad():
        cond = psi(batch) * latent_scale
        z_hat = ddim_sample(cond, unet, schedule, K=K, eta=eta, seed=seed)
        decoded = vqvae.decoder(z_hat / latent_scale).clamp(0.0, 1.0)
    return [UltrasoundImage(decoded[i, 0].cpu().numpy().astype(np.float32)) for i in range(len(images))]


def denoise_batch(
    images: list[UltrasoundImage], bundle: ModelBundle, K: int, eta: float = 0.0, seed: int = 0
) -> list[UltrasoundImage]:
    bundle.psi.eval()
    bundle.unet.eval()
    bundle.vqvae.eval()
    return denoise_pairs_quick(
        images, bundle.vqvae, bundle.psi, bundle.unet, bundle.schedule,
        bundle.latent_scale, K=K, eta=eta, seed=seed,
    )


def denoise_image(
    image: UltrasoundImage, bundle: ModelBundle, K: int, eta: float = 0.0, seed: int = 0
) -> UltrasoundImage:
    """Suppress interference in one frame; output shape equals input shape."""
    return denoise_batch([image], bundle, K=K, eta=eta, seed=seed)[0]


def run_denoise(
    input_paths: list,
    bundle: ModelBundle,
    K: int,
    seed: int,
    out_dir,
    reference_paths: list | None = None,
    write_png: bool = True,
    chunk_size: int = 16,
) -> tuple[list[Path], MetricReport | None]:
    """Denoise a batch of files, writing *.denoised outputs next to out_dir.
    When references are supplied, also score the results against them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = [load_any(p) for p in input_paths]
    denoised: list[UltrasoundImage] = []
    for start in range(0, len(images), chunk_size):
        chunk = images[start : start + chunk_size]
        denoised.extend(denoise_batch(chunk, bundle, K=K, seed=seed + start))

    written = []
    for src, img in zip(input_paths, denoised):
        stem = Path(src).stem
        raw_path = out / f"{stem}.denoised.ild"
        save_raw(img, raw_path)
        if write_png:
            save_image(img, out / f"{stem}.denoised.png")
        written.append(raw_path)

    report = None
    if reference_paths is not None:
        if len(reference_paths) != len(input_paths):
            raise ParameterError("reference list length differs from input list")
        refs = [load_any(p) for p in reference_paths]
        report = evaluate_pairs(denoised, refs, seed=seed)
    return written, report


# ---------------------------------------------------------------------------
# Timing benchmark


@dataclass
class TimingReport:
    ks: list
    loop_ms_mean: list
    loop_ms_std: list
    encoder_ms: float
    decoder_ms: float
    fps: list
    fit_slope: float
    fit_intercept: float
    r_squared: float
    repetitions: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    def summary(self) -> str:
        lines = [f"{'K':>4}  {'loop ms':>10}  {'std':>8}  {'fps':>8}"]
        for k, m, s, f in zip(self.ks, self.loop_ms_mean, self.loop_ms_std, self.fps):
            lines.append(f"{k:>4}  {m:>10.2f}  {s:>8.2f}  {f:>8.2f}")
        lines.append(
            f"encode {self.encoder_ms:.2f} ms, decode {self.decoder_ms:.2f} ms; "
            f"loop-time fit: {self.fit_slope:.3f} ms/step + {self.fit_intercept:.2f} ms "
            f"(R^2 = {self.r_squared:.4f})"
        )
        return "\n".join(lines)


def bench_timing(
    bundle: ModelBundle,
    ks=(5, 10, 20, 30),
    repetitions: int = 5,
    image: UltrasoundImage | None = None,
    seed: int = 0,
) -> TimingReport:
    """Time the sampler loop per K (warm-up excluded) plus the one-off
    encoder/decoder overhead, and fit loop time against K."""
    from .imaging import synth_clean_phantom

    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise ParameterError("K values must be >= 1")
    if image is None:
        image = synth_clean_phantom(seed, bundle.config.image_size, bundle.config.image_size)

    dtype = next(bundle.unet.parameters()).dtype
    bundle.psi.eval()
    bundle.unet.eval()
    bundle.vqvae.eval()
    batch = _to_batch([image], dtype)

    with torch.no_grad():
        # encoder timing
        enc_times = []
        for _ in range(repetitions + 1):
            t0 = time.perf_counter()
            cond = bundle.psi(batch) * bundle.latent_scale
            enc_times.append((time.perf_counter() - t0) * 1e3)
        encoder_ms = float(np.mean(enc_times[1:]))

        # warm-up sampler path
        ddim_sample(cond, bundle.unet, bundle.schedule, K=ks[0], seed=seed)

        loop_mean, loop_std = [], []
        z_hat = None
        for k in ks:
            times = []
            for rep in range(repetitions):
                t0 = time.perf_counter()
                z_hat = ddim_sample(cond, bundle.unet, bundle.schedule, K=k, seed=seed + rep)
                times.append((time.perf_counter() - t0) * 1e3)
            loop_mean.append(float(np.mean(times)))
            loop_std.append(float(np.std(times)))

        dec_times = []
        for _ in range(repetitions + 1):
            t0 = time.perf_counter()
            bundle.vqvae.decoder(z_hat / bundle.latent_scale).clamp(0.0, 1.0)
            dec_times.append((time.perf_counter() - t0) * 1e3)
        decoder_ms = float(np.mean(dec_times[1:]))

    xs = np.asarray(ks, dtype=np.float64)
    ys = np.asarray(loop_mean, dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r_squared = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0

    fps = [1000.0 / (encoder_ms + m + decoder_ms) for m in loop_mean]
    return TimingReport(
        ks=list(ks),
        loop_ms_mean=loop_mean,
        loop_ms_std=loop_std,
        encoder_ms=encoder_ms,
        decoder_ms=decoder_ms,
        fps=fps,
        fit_slope=float(slope),
        fit_intercept=float(intercept),
        r_squared=r_squared,
        repetitions=repetitions,
    )


# ---------------------------------------------------------------------------
# Ablation grid


def _ablation_variants(cfg: RunConfig, t_grid) -> list[tuple[str, RunConfig]]:
    variants = []
    for t in t_grid:
        variants.append(
            (f"T={t}", dataclasses.replace(cfg, schedule=ScheduleConfig(
                timesteps=t, beta_start=cfg.schedule.beta_start, beta_end=cfg.schedule.beta_end)))
        )
    for vq_attn in (True, False):
        for unet_attn in (True, False):
            vq = VqVaeConfig(
                encoder=dataclasses.replace(cfg.vqvae.encoder, bottleneck_attention=vq_attn),
                codebook_size=cfg.vqvae.codebook_size,
                loss=cfg.vqvae.loss,
            )
            un = dataclasses.replace(
                cfg.unet,
                attention_levels=cfg.unet.attention_levels if unet_attn else frozenset(),
                bottleneck_attention=unet_attn,
            )
            name = f"vqvae_attn={'on' if vq_attn else 'off'},unet_attn={'on' if unet_attn else 'off'}"
            variants.append((name, dataclasses.replace(cfg, vqvae=vq, unet=un)))
    return variants


def run_ablation(
    cfg: RunConfig,
    out_dir,
    t_grid=(500, 1000, 2000),
    K: int = 30,
    eval_pairs: int = 16,
    seed: int = 0,
) -> list[dict]:
    """Train and score every variant in the grid: forward-step counts and
    attention placement toggles. Returns one row per variant."""
    from . import training  # deferred: training imports this module
    from .imaging import load_manifest_pairs
    from .metrics import psnr, ssim

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_pairs = load_manifest_pairs(Path(cfg.dataset_dir) / "test.jsonl")[:eval_pairs]

    rows = []
    for name, variant_cfg in _ablation_variants(cfg, t_grid):
        work = out / name.replace("=", "_").replace(",", "__")
        s1 = training.train_stage1(variant_cfg, work)
        s2 = training.train_stage2(variant_cfg, s1.checkpoint_path, work)
        bundle = load_bundle(s2.checkpoint_path, variant_cfg)

        contaminated = [p.contaminated for p in test_pairs]
        t0 = time.perf_counter()
        denoised = denoise_batch(contaminated, bundle, K=K, seed=seed)
        ms_per_frame = (time.perf_counter() - t0) * 1e3 / len(test_pairs)

        rows.append(
            {
                "variant": name,
                "ssim": float(np.mean([ssim(d, p.clean) for d, p in zip(denoised, test_pairs)])),
                "psnr": float(np.mean([psnr(d, p.clean) for d, p in zip(denoised, test_pairs)])),
                "ms_per_frame": float(ms_per_frame),
            }
        )

    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True), encoding="utf-8")
    (out / "ablation.txt").write_text(format_ablation_table(rows) + "\n", encoding="utf-8")
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'variant':<42}  {'SSIM':>7}  {'PSNR':>8}  {'ms/frame':>9}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['variant']:<42}  {row['ssim']:>7.4f}  {row['psnr']:>8.3f}  "
            f"{row['ms_per_frame']:>9.2f}"
        )
    return "\n".join(lines)
