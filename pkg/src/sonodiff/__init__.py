"""Latent-diffusion suppression of therapeutic-ultrasound interference in
B-mode images, plus the notch-filter baseline and evaluation tooling."""

from .config import RunConfig, ScheduleConfig, VqVaeConfig
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    build_schedule,
    ddim_sample,
    ddim_step,
    ldm_loss,
    q_sample,
)
from .entropy import WueConfig, active_backend, wue_map
from .imaging import (
    DatasetSpec,
    ImagePair,
    InterferenceConfig,
    Session,
    UltrasoundImage,
    apply_hifu_interference,
    generate_dataset,
    load_image,
    load_raw,
    make_pairs,
    save_image,
    save_raw,
    split_dataset,
    synth_clean_phantom,
)
from .metrics import MetricReport, bootstrap_ci, evaluate_pairs, psnr, ssim
from .notch import NotchConfig, apply_notch, design_notch
from .pipeline import (
    ModelBundle,
    bench_timing,
    build_bundle,
    denoise_batch,
    denoise_image,
    load_bundle,
    run_ablation,
    save_bundle,
)
from .training import TrainResult, augment_pair, train_stage1, train_stage2
from .unet import NoisePredictor, UNetConfig, predict_noise
from .vqvae import (
    Encoder,
    EncoderConfig,
    QuantizedLatent,
    VectorQuantizer,
    VqLossConfig,
    VqVae,
    decode,
    encode,
    encode_condition,
    quantize,
    vqvae_loss,
)

__version__ = "0.1.0"
