"""B-mode image representation, file I/O, synthetic phantom generation, the
additive interference model, duty-cycle pairing, and dataset splitting.

Images are grayscale intensity grids in [0, 1]. Two on-disk encodings exist:
8-bit PNG rasters for human inspection, and a lossless raw float32 format
("ILD1" magic) for pipeline data. Dataset manifests are JSON-lines records.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .exceptions import (
    DataError,
    FormatError,
    ParameterError,
    ShapeError,
    SplitError,
)

POWER_LEVELS = (123, 167, 220, 277)
MODALITIES = ("DW", "WB", "LS")
TISSUE_CLASSES = ("phantom", "ex_vivo", "in_vivo")

RAW_MAGIC = b"ILD1"

MANIFEST_FIELDS = ("path_contaminated", "path_clean", "modality", "power", "tissue", "group")


@dataclass
class UltrasoundImage:
    """A single grayscale frame: float32 intensities in [0, 1].

    Height and width must each be >= 16 and divisible by 4 so that the
    two stride-2 encoder stages produce an exact quarter-resolution latent.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ShapeError(f"expected a 2-D intensity grid, got ndim={px.ndim}")
        h, w = px.shape
        if h < 16 or w < 16 or h % 4 != 0 or w % 4 != 0:
            raise ShapeError(
                f"image dimensions must be >= 16 and divisible by 4, got {h}x{w}"
            )
        if not np.isfinite(px).all():
            raise ParameterError("image contains non-finite pixels")
        if float(px.min()) < 0.0 or float(px.max()) > 1.0:
            raise ParameterError(
                f"pixels must lie in [0, 1], got range "
                f"[{float(px.min()):.6g}, {float(px.max()):.6g}]"
            )
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class InterferenceConfig:
    """Parameters of the additive corruption applied to a clean frame.

    The fringe amplitude grows linearly with the index of the power label in
    POWER_LEVELS, so higher acoustic power always corrupts more.
    """

    power_level: int
    base_amplitude: float = 0.1
    fringe_frequency: float = 0.18  # cycles per pixel along the axial (row) axis
    broadband_sigma: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.power_level not in POWER_LEVELS:
            raise ParameterError(
                f"power_level must be one of {POWER_LEVELS}, got {self.power_level}"
            )
        if not (0.0 < self.fringe_frequency < 0.5):
            raise ParameterError(
                f"fringe_frequency must lie in (0, 0.5), got {self.fringe_frequency}"
            )
        if self.base_amplitude < 0.0:
            raise ParameterError("base_amplitude must be non-negative")
        if self.broadband_sigma < 0.0:
            raise ParameterError("broadband_sigma must be non-negative")

    @property
    def amplitude(self) -> float:
        """Fringe amplitude for this power label: base * (1 + label index)."""
        return self.base_amplitude * (1 + POWER_LEVELS.index(self.power_level))


@dataclass
class ImagePair:
    """One supervised training unit: a contaminated frame and its clean
    reference, plus acquisition metadata."""

    contaminated: UltrasoundImage
    clean: UltrasoundImage
    modality: str
    power_level: int
    tissue_class: str
    group_id: str

    def __post_init__(self):
        if self.contaminated.shape != self.clean.shape:
            raise ShapeError(
                f"pair shapes differ: {self.contaminated.shape} vs {self.clean.shape}"
            )
        if not self.group_id:
            raise ParameterError("group_id must be non-empty")
        if self.modality not in MODALITIES:
            raise ParameterError(f"modality must be one of {MODALITIES}")
        if self.tissue_class not in TISSUE_CLASSES:
            raise ParameterError(f"tissue_class must be one of {TISSUE_CLASSES}")


@dataclass
class Session:
    """An ordered acquisition: frames with per-frame emitter on/off labels."""

    frames: list[UltrasoundImage]
    hifu_on: list[bool]
    modality: str
    power_level: int
    tissue_class: str
    group_id: str

    def __post_init__(self):
        if len(self.frames) != len(self.hifu_on):
            raise ParameterError("frames and hifu_on must have equal length")


@dataclass
class PairingResult:
    pairs: list[ImagePair]
    skipped_cycles: int


@dataclass
class DatasetSplit:
    """Group-disjoint train/validation/test partition of pairs.

    Ratios must fall within +/-5 percentage points of 60/20/20 by pair count.
    """

    train: list[ImagePair]
    validation: list[ImagePair]
    test: list[ImagePair]

    def __post_init__(self):
        groups = [
            {p.group_id for p in part} for part in (self.train, self.validation, self.test)
        ]
        if (groups[0] & groups[1]) or (groups[0] & groups[2]) or (groups[1] & groups[2]):
            raise SplitError("group_ids overlap across splits")
        total = len(self.train) + len(self.validation) + len(self.test)
        if total == 0:
            raise SplitError("empty split")
        targets = (0.6, 0.2, 0.2)
        counts = (len(self.train), len(self.validation), len(self.test))
        for count, target in zip(counts, targets):
            if abs(count / total - target) > 0.05 + 1e-9:
                raise SplitError(
                    f"split ratios {tuple(c / total for c in counts)} deviate more "
                    f"than 5 points from 60/20/20"
                )


# ---------------------------------------------------------------------------
# File I/O


def load_image(path) -> UltrasoundImage:
    """Load an 8-bit grayscale raster; stored byte v becomes pixel v/255."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise FormatError(
                    f"{path}: expected 8-bit grayscale (mode 'L'), got mode {im.mode!r}"
                )
            data = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a decodable raster image") from exc
    return UltrasoundImage(data.astype(np.float32) / 255.0)


def save_image(image: UltrasoundImage, path) -> None:
    """Write an 8-bit grayscale raster; pixel p becomes byte round(255 p)."""
    data = np.rint(image.pixels.astype(np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_raw_array(path) -> np.ndarray:
    """Load the lossless raw format: b'ILD1', u32le height, u32le width,
    then height*width float32le values, row-major."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: missing {RAW_MAGIC!r} magic")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w).copy()


def save_raw_array(values: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeError("raw format stores 2-D grids")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_raw(path) -> UltrasoundImage:
    return UltrasoundImage(load_raw_array(path))


def save_raw(image: UltrasoundImage, path) -> None:
    save_raw_array(image.pixels, path)


def load_any(path) -> UltrasoundImage:
    """Dispatch on the raw-format magic, falling back to raster decoding."""
    p = Path(path)
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == RAW_MAGIC:
        return load_raw(p)
    return load_image(p)


# ---------------------------------------------------------------------------
# Synthetic phantom and interference


@dataclass(frozen=True)
class PhantomLayout:
    disk_centers: tuple  # ((row, col), ...)
    disk_radius: int
    wire_row: int
    wire_col: int


def phantom_layout(
    seed: int, height: int, width: int, n_inclusions: int, inclusion_radius: int | None = None
) -> PhantomLayout:
    """Deterministic geometry for a phantom: one wire cross plus anechoic
    disk centers kept clear of the wires."""
    if n_inclusions < 0:
        raise ParameterError("n_inclusions must be non-negative")
    radius = inclusion_radius if inclusion_radius is not None else min(height, width) // 8
    margin = radius + 3
    if n_inclusions > 0 and (2 * margin >= height or 2 * margin >= width):
        raise ParameterError(
            f"inclusion radius {radius} does not fit inside a {height}x{width} image"
        )
    rng = np.random.default_rng([seed, 0x1A70])
    wy = int(rng.integers(height // 3, 2 * height // 3))
    wx = int(rng.integers(width // 3, 2 * width // 3))

    def allowed(extent: int, wire: int) -> np.ndarray:
        # keep disk centers clear of the wires, relaxing down to the minimum
        # clearance that still prevents wire/disk overlap
        for clearance in range(radius + 5, radius + 1, -1):
            coords = np.arange(margin, extent - margin)
            coords = coords[np.abs(coords - wire) > clearance]
            if coords.size:
                return coords
        raise ParameterError(
            f"cannot place radius-{radius} inclusions clear of the wires in a "
            f"{height}x{width} image"
        )

    centers = []
    if n_inclusions > 0:
        ys, xs = allowed(height, wy), allowed(width, wx)
        for _ in range(n_inclusions):
            centers.append((int(rng.choice(ys)), int(rng.choice(xs))))
    return PhantomLayout(
        disk_centers=tuple(centers), disk_radius=radius, wire_row=wy, wire_col=wx
    )


def synth_clean_phantom(
    seed: int,
    height: int,
    width: int,
    n_inclusions: int = 2,
    inclusion_radius: int | None = None,
) -> UltrasoundImage:
    """Generate a speckle phantom with anechoic disks and one bright cross.

    A complex random scatterer field is shaped by an amplitude map (near-zero
    inside the anechoic disks, strongly reflective along two crossing wires),
    convolved with a separable Gaussian point-spread function, envelope
    detected, log-compressed over a 50 dB dynamic range, and normalized to
    [0, 1].
    """
    if height < 16 or width < 16 or height % 4 or width % 4:
        raise ShapeError(f"invalid phantom dimensions {height}x{width}")
    layout = phantom_layout(seed, height, width, n_inclusions, inclusion_radius)

    rng = np.random.default_rng([seed, 0x5CA7])
    scat = rng.normal(size=(height, width)) + 1j * rng.normal(size=(height, width))

    amp = np.ones((height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    for cy, cx in layout.disk_centers:
        # suppress slightly past the nominal radius so PSF bleed stays outside
        amp[(yy - cy) ** 2 + (xx - cx) ** 2 <= (layout.disk_radius + 2) ** 2] = 1e-3
    amp[layout.wire_row, :] = np.maximum(amp[layout.wire_row, :], 10.0)
    amp[:, layout.wire_col] = np.maximum(amp[:, layout.wire_col], 10.0)

    field = scat * amp
    sigma = (1.8, 2.4)  # axial, lateral PSF extent in pixels
    blurred = gaussian_filter(field.real, sigma) + 1j * gaussian_filter(field.imag, sigma)
    envelope = np.abs(blurred)

    ref = envelope.max()
    db = 20.0 * np.log10(np.maximum(envelope, 1e-12) / ref)
    dyn = 50.0
    px = np.clip((db + dyn) / dyn, 0.0, 1.0)
    return UltrasoundImage(px.astype(np.float32))


def apply_hifu_interference(clean: UltrasoundImage, cfg: InterferenceConfig) -> UltrasoundImage:
    """Corrupt a clean frame: axial sinusoidal fringes with a per-frame random
    phase plus broadband Gaussian noise, clipped back into [0, 1]."""
    rng = np.random.default_rng(cfg.seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    rows = np.arange(clean.height, dtype=np.float64)
    fringe = np.sin(2.0 * np.pi * cfg.fringe_frequency * rows + phase)[:, None]
    out = clean.pixels.astype(np.float64) + cfg.amplitude * fringe
    if cfg.broadband_sigma > 0.0:
        out = out + rng.normal(0.0, cfg.broadband_sigma, size=clean.shape)
    return UltrasoundImage(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Duty-cycle pairing and splitting


def make_pairs(session: Session) -> PairingResult:
    """Pair frames per the duty cycle: in each on-segment followed by an
    off-segment, the last two on-frames each pair with the first off-frame.

    Cycles with fewer than two on-frames or with no following off-segment are
    skipped and counted rather than raising.
    """
    runs: list[tuple[bool, list[int]]] = []
    for i, on in enumerate(session.hifu_on):
        if runs and runs[-1][0] == on:
            runs[-1][1].append(i)
        else:
            runs.append((on, [i]))

    pairs: list[ImagePair] = []
    skipped = 0
    for k, (on, idxs) in enumerate(runs):
        if not on:
            continue
        next_off = runs[k + 1][1] if k + 1 < len(runs) else None
        if next_off is None or len(idxs) < 2:
            skipped += 1
            continue
        off_frame = session.frames[next_off[0]]
        for j in (idxs[-2], idxs[-1]):
            pairs.append(
                ImagePair(
                    contaminated=session.frames[j],
                    clean=off_frame,
                    modality=session.modality,
                    power_level=session.power_level,
                    tissue_class=session.tissue_class,
                    group_id=session.group_id,
                )
            )
    return PairingResult(pairs=pairs, skipped_cycles=skipped)


def split_dataset(pairs: list[ImagePair], seed: int) -> DatasetSplit:
    """Partition pairs into 60/20/20 train/validation/test keeping every
    group_id in exactly one split."""
    groups: dict[str, list[ImagePair]] = {}
    for p in pairs:
        groups.setdefault(p.group_id, []).append(p)
    if len(groups) < 3:
        raise SplitError(f"need at least 3 distinct groups, got {len(groups)}")

    rng = np.random.default_rng(seed)
    order = sorted(groups)
    rng.shuffle(order)
    # biggest groups first (seeded shuffle breaks ties among equal sizes)
    order.sort(key=lambda gid: -len(groups[gid]))

    total = len(pairs)
    targets = [0.6 * total, 0.2 * total, 0.2 * total]
    buckets: list[list[ImagePair]] = [[], [], []]
    counts = [0, 0, 0]
    for gid in order:
        deficits = [targets[i] - counts[i] for i in range(3)]
        dest = max(range(3), key=lambda i: (deficits[i], -i))
        buckets[dest].extend(groups[gid])
        counts[dest] += len(groups[gid])
    return DatasetSplit(train=buckets[0], validation=buckets[1], test=buckets[2])


# ---------------------------------------------------------------------------
# Manifests and dataset generation


def write_manifest(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise DataError(f"manifest record missing fields {missing}")
            fh.write(json.dumps({k: rec[k] for k in MANIFEST_FIELDS}, sort_keys=True))
            fh.write("\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: malformed manifest line") from exc
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise DataError(f"{path}:{line_no}: missing fields {missing}")
            records.append(rec)
    return records


def load_manifest_pairs(path) -> list[ImagePair]:
    """Materialize manifest records into in-memory pairs. Relative paths are
    resolved against the manifest's directory."""
    root = Path(path).parent
    pairs = []
    for rec in read_manifest(path):
        pairs.append(
            ImagePair(
                contaminated=load_any(root / rec["path_contaminated"]),
                clean=load_any(root / rec["path_clean"]),
                modality=rec["modality"],
                power_level=int(rec["power"]),
                tissue_class=rec["tissue"],
                group_id=rec["group"],
            )
        )
    return pairs


@dataclass(frozen=True)
class DatasetSpec:
    """Knobs for the synthetic dataset generator."""

    n_sessions: int = 25
    cycles_per_session: int = 10
    frames_on: int = 3
    frames_off: int = 1
    height: int = 64
    width: int = 64
    n_inclusions: int = 2
    base_amplitude: float = 0.1
    fringe_frequency: float = 0.18
    broadband_sigma: float = 0.08

    def __post_init__(self):
        if self.n_sessions < 3:
            raise ParameterError("need at least 3 sessions for a group-disjoint split")
        if self.cycles_per_session < 1 or self.frames_on < 2 or self.frames_off < 1:
            raise ParameterError("each cycle needs >= 2 on-frames and >= 1 off-frame")


def build_session(spec: DatasetSpec, session_index: int, seed: int) -> Session:
    """Simulate one acquisition: a static phantom imaged over alternating
    emitter-on / emitter-off segments."""
    base_seed = seed * 100003 + session_index * 977
    clean = synth_clean_phantom(base_seed, spec.height, spec.width, spec.n_inclusions)
    power = POWER_LEVELS[session_index % len(POWER_LEVELS)]
    frames: list[UltrasoundImage] = []
    labels: list[bool] = []
    frame_counter = 0
    for _ in range(spec.cycles_per_session):
        for _ in range(spec.frames_on):
            cfg = InterferenceConfig(
                power_level=power,
                base_amplitude=spec.base_amplitude,
                fringe_frequency=spec.fringe_frequency,
                broadband_sigma=spec.broadband_sigma,
                seed=base_seed + 7919 * (frame_counter + 1),
            )
            frames.append(apply_hifu_interference(clean, cfg))
            labels.append(True)
            frame_counter += 1
        for _ in range(spec.frames_off):
            frames.append(clean)
            labels.append(False)
            frame_counter += 1
    return Session(
        frames=frames,
        hifu_on=labels,
        modality=MODALITIES[session_index % len(MODALITIES)],
        power_level=power,
        tissue_class="phantom",
        group_id=f"session{session_index:03d}",
    )


def generate_dataset(out_dir, seed: int, spec: DatasetSpec | None = None, write_png: bool = True) -> dict:
    """Generate sessions, pair them, split by group, and write images plus
    train/validation/test manifests under out_dir.

    Returns a summary dict with pair counts per split.
    """
    spec = spec or DatasetSpec()
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    all_pairs: list[ImagePair] = []
    total_skipped = 0
    for s in range(spec.n_sessions):
        session = build_session(spec, s, seed)
        result = make_pairs(session)
        total_skipped += result.skipped_cycles
        all_pairs.extend(result.pairs)

    split = split_dataset(all_pairs, seed)

    written: dict[int, str] = {}

    def _write(image: UltrasoundImage, stem: str) -> str:
        key = id(image.pixels)
        if key in written:
            return written[key]
        rel = f"images/{stem}.ild"
        save_raw(image, out / rel)
        if write_png:
            save_image(image, out / f"images/{stem}.png")
        written[key] = rel
        return rel

    counts = {}
    for name, part in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        records = []
        for i, pair in enumerate(part):
            rec = {
                "path_contaminated": _write(pair.contaminated, f"{pair.group_id}_p{i:04d}_{name}_on"),
                "path_clean": _write(pair.clean, f"{pair.group_id}_clean"),
                "modality": pair.modality,
                "power": pair.power_level,
                "tissue": pair.tissue_class,
                "group": pair.group_id,
            }
            records.append(rec)
        write_manifest(out / f"{name}.jsonl", records)
        counts[name] = len(records)
    counts["skipped_cycles"] = total_skipped
    counts["fringe_frequency"] = spec.fringe_frequency
    with open(out / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump({**counts, "seed": seed, **dataclasses.asdict(spec)}, fh, indent=2, sort_keys=True)
    return counts
