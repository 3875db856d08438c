"""Command-line surface.

Subcommands: gen-data, train-vqvae, train-diffusion, denoise, baseline-notch,
evaluate, entropy, bench, ablate. Exit codes: 0 success, 2 usage error,
3 data error, 4 checkpoint/state error, 5 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import entropy as entropy_mod
from . import pipeline, training
from .config import RunConfig
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    DataError,
    FormatError,
    ParameterError,
    ShapeError,
    TrainingDivergenceError,
)
from .imaging import (
    DatasetSpec,
    UltrasoundImage,
    generate_dataset,
    load_any,
    read_manifest,
    save_image,
    save_raw,
    save_raw_array,
)
from .metrics import evaluate_pairs
from .notch import NotchConfig, apply_notch

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_STATE = 4
EXIT_DIVERGED = 5


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.desk_preset()
    updates = {}
    if getattr(args, "data", None):
        updates["dataset_dir"] = str(args.data)
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _common(parser: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", default="out", help="output directory")


def _manifest_inputs(args) -> tuple[list[Path], list[Path] | None]:
    root = Path(args.manifest).parent
    records = read_manifest(args.manifest)
    inputs = [root / r["path_contaminated"] for r in records]
    refs = [root / r["path_clean"] for r in records]
    return inputs, refs


# ---------------------------------------------------------------------------
# Subcommand handlers


def _cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        n_sessions=args.sessions,
        cycles_per_session=args.cycles,
        frames_on=args.frames_on,
        frames_off=args.frames_off,
        height=args.size,
        width=args.size,
        n_inclusions=args.inclusions,
        base_amplitude=args.base_amplitude,
        fringe_frequency=args.fringe_freq,
        broadband_sigma=args.noise_sigma,
    )
    counts = generate_dataset(args.out, seed=args.seed or 0, spec=spec, write_png=not args.no_png)
    print(json.dumps(counts, indent=2, sort_keys=True))
    return 0


def _cmd_train_vqvae(args) -> int:
    cfg = _load_config(args)
    result = training.train_stage1(cfg, args.out)
    print(
        f"stage-1 done: best step {result.best_step} "
        f"(val mse {result.best_metric:.6f}) -> {result.checkpoint_path}"
    )
    return 0


def _cmd_train_diffusion(args) -> int:
    cfg = _load_config(args)
    result = training.train_stage2(cfg, args.stage1, args.out)
    print(
        f"stage-2 done: best step {result.best_step} "
        f"(val ssim {result.best_metric:.4f}) -> {result.checkpoint_path}"
    )
    return 0


def _cmd_denoise(args) -> int:
    if args.k < 1:
        raise ParameterError(f"--k must be >= 1, got {args.k}")
    cfg = RunConfig.load(args.config) if args.config else None
    bundle = pipeline.load_bundle(args.checkpoint, cfg)
    if args.manifest:
        inputs, refs = _manifest_inputs(args)
        if not args.eval:
            refs = None
    else:
        if not args.inputs:
            raise ParameterError("provide input images or --manifest")
        inputs = [Path(p) for p in args.inputs]
        refs = None
        if args.eval:
            raise ParameterError("--eval needs clean references; use --manifest")
    seed = args.seed if args.seed is not None else bundle.config.seed
    written, report = pipeline.run_denoise(
        inputs, bundle, K=args.k, seed=seed, out_dir=args.out, reference_paths=refs
    )
    print(f"wrote {len(written)} denoised frames to {args.out}")
    if report is not None:
        print(report.summary())
        (Path(args.out) / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_baseline_notch(args) -> int:
    cfg = NotchConfig(
        center_freq=args.notch_freq,
        quality_factor=args.notch_q,
        zero_phase=not args.no_zero_phase,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        inputs, refs = _manifest_inputs(args)
        if not args.eval:
            refs = None
    else:
        if not args.inputs:
            raise ParameterError("provide input images or --manifest")
        inputs, refs = [Path(p) for p in args.inputs], None
        if args.eval:
            raise ParameterError("--eval needs clean references; use --manifest")
    filtered = []
    for src in inputs:
        img = apply_notch(load_any(src), cfg)
        filtered.append(img)
        save_raw(img, out / f"{Path(src).stem}.notched.ild")
        if not args.no_png:
            save_image(img, out / f"{Path(src).stem}.notched.png")
    print(f"wrote {len(filtered)} notch-filtered frames to {out}")
    if refs is not None:
        report = evaluate_pairs(filtered, [load_any(p) for p in refs], seed=args.seed or 0)
        print(report.summary())
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_evaluate(args) -> int:
    root = Path(args.manifest).parent
    records = read_manifest(args.manifest)
    pred_dir = Path(args.denoised_dir)
    predicted, reference = [], []
    for rec in records:
        stem = Path(rec["path_contaminated"]).stem
        candidates = [pred_dir / f"{stem}{suffix}" for suffix in
                      (".denoised.ild", ".denoised.png", ".notched.ild", ".notched.png")]
        hit = next((c for c in candidates if c.exists()), None)
        if hit is None:
            raise DataError(f"no prediction found for {stem!r} under {pred_dir}")
        predicted.append(load_any(hit))
        reference.append(load_any(root / rec["path_clean"]))
    report = evaluate_pairs(predicted, reference, seed=args.seed or 0)
    print(report.summary())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_entropy(args) -> int:
    cfg = entropy_mod.WueConfig(window=args.window, bins=args.bins, weighting=args.weighting)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src in args.inputs:
        image = load_any(src)
        wue = entropy_mod.wue_map(image, cfg)
        stem = Path(src).stem
        save_raw_array(wue, out / f"{stem}.wue.ild")
        lo, hi = float(wue.min()), float(wue.max())
        norm = (wue - lo) / (hi - lo) if hi > lo else np.zeros_like(wue)
        save_image(UltrasoundImage(norm.astype(np.float32)), out / f"{stem}.wue.png")
    print(f"wrote {len(args.inputs)} entropy maps to {out} (backend: {entropy_mod.active_backend()})")
    return 0


def _cmd_bench(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else None
    bundle = pipeline.load_bundle(args.checkpoint, cfg)
    report = pipeline.bench_timing(
        bundle,
        ks=[int(k) for k in args.ks.split(",")],
        repetitions=args.repetitions,
        seed=args.seed or 0,
    )
    print(report.summary())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "timing.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.stage1_steps:
        cfg = dataclasses.replace(cfg, stage1_steps=args.stage1_steps)
    if args.stage2_steps:
        cfg = dataclasses.replace(cfg, stage2_steps=args.stage2_steps)
    t_grid = tuple(int(t) for t in args.t_grid.split(","))
    rows = pipeline.run_ablation(
        cfg, args.out, t_grid=t_grid, K=args.k, eval_pairs=args.eval_pairs, seed=cfg.seed
    )
    print(pipeline.format_ablation_table(rows))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonodiff",
        description="Latent-diffusion interference suppression for B-mode ultrasound images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    _common(p, config=False)
    p.add_argument("--sessions", type=int, default=25)
    p.add_argument("--cycles", type=int, default=10)
    p.add_argument("--frames-on", type=int, default=3)
    p.add_argument("--frames-off", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--inclusions", type=int, default=2)
    p.add_argument("--base-amplitude", type=float, default=0.1)
    p.add_argument("--fringe-freq", type=float, default=0.18)
    p.add_argument("--noise-sigma", type=float, default=0.08)
    p.add_argument("--no-png", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-vqvae", help="stage one: train the autoencoder on clean frames")
    _common(p)
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.set_defaults(func=_cmd_train_vqvae)

    p = sub.add_parser("train-diffusion", help="stage two: train the condition encoder and noise predictor")
    _common(p)
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--stage1", required=True, help="stage-one checkpoint")
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("denoise", help="suppress interference in images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=5, help="reverse sampling steps")
    p.add_argument("--manifest", help="score/denoise the frames of a manifest")
    p.add_argument("--eval", action="store_true", help="score against clean references")
    p.add_argument("inputs", nargs="*", help="input image files")
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("baseline-notch", help="apply the notch-filter baseline")
    _common(p, config=False)
    p.add_argument("--notch-freq", type=float, default=0.18, help="center frequency, cycles/pixel")
    p.add_argument("--notch-q", type=float, default=10.0)
    p.add_argument("--no-zero-phase", action="store_true")
    p.add_argument("--manifest")
    p.add_argument("--eval", action="store_true")
    p.add_argument("--no-png", action="store_true")
    p.add_argument("inputs", nargs="*")
    p.set_defaults(func=_cmd_baseline_notch)

    p = sub.add_parser("evaluate", help="score predictions against a manifest's references")
    _common(p, config=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--denoised-dir", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("entropy", help="weighted-entropy maps of images")
    _common(p, config=False)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--weighting", choices=("uniform", "intensity"), default="intensity")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=_cmd_entropy)

    p = sub.add_parser("bench", help="sampler timing across K values")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ks", default="5,10,20,30")
    p.add_argument("--repetitions", type=int, default=5)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    _common(p)
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--t-grid", default="500,1000,2000")
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--eval-pairs", type=int, default=16)
    p.add_argument("--stage1-steps", type=int, default=None)
    p.add_argument("--stage2-steps", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ParameterError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
