import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sonodiff
from sonodiff.exceptions import (
    FormatError,
    ParameterError,
    ShapeError,
    SplitError,
)
from sonodiff.imaging import (
    MODALITIES,
    POWER_LEVELS,
    DatasetSpec,
    ImagePair,
    InterferenceConfig,
    Session,
    UltrasoundImage,
    apply_hifu_interference,
    build_session,
    generate_dataset,
    load_any,
    load_image,
    load_manifest_pairs,
    load_raw,
    make_pairs,
    phantom_layout,
    read_manifest,
    save_image,
    save_raw,
    split_dataset,
    synth_clean_phantom,
    write_manifest,
)


def _image(value=0.5, h=32, w=32):
    return UltrasoundImage(np.full((h, w), value, dtype=np.float32))


class TestUltrasoundImage:
    def test_valid(self):
        img = _image()
        assert img.height == 32 and img.width == 32 and img.shape == (32, 32)

    @pytest.mark.parametrize("h,w", [(15, 32), (32, 15), (18, 32), (32, 30)])
    def test_bad_dimensions(self, h, w):
        with pytest.raises(ShapeError):
            UltrasoundImage(np.zeros((h, w), dtype=np.float32))

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            UltrasoundImage(np.full((32, 32), 1.5, dtype=np.float32))
        with pytest.raises(ParameterError):
            UltrasoundImage(np.full((32, 32), -0.1, dtype=np.float32))

    def test_non_finite(self):
        px = np.zeros((32, 32), dtype=np.float32)
        px[0, 0] = np.nan
        with pytest.raises(ParameterError):
            UltrasoundImage(px)


class TestRasterIO:
    def test_zero_image_roundtrip(self, tmp_path):
        path = tmp_path / "z.png"
        save_image(_image(0.0), path)
        loaded = load_image(path)
        assert (loaded.pixels == 0).all()

    def test_byte_255_maps_to_one(self, tmp_path):
        path = tmp_path / "one.png"
        save_image(_image(1.0), path)
        assert load_image(path).pixels.max() == 1.0

    def test_byte_128(self, tmp_path):
        # byte 128 decodes to 128/255
        path = tmp_path / "mid.png"
        save_image(_image(128.0 / 255.0), path)
        assert load_image(path).pixels[0, 0] == pytest.approx(128.0 / 255.0, abs=1e-9)

    def test_half_rounds_to_128(self, tmp_path):
        path = tmp_path / "half.png"
        save_image(_image(0.5), path)
        raw = np.asarray(__import__("PIL.Image", fromlist=["Image"]).open(path))
        assert raw[0, 0] == 128  # round(0.5 * 255) = 128

    def test_roundtrip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(0)
        img = UltrasoundImage(rng.random((32, 32)).astype(np.float32))
        path = tmp_path / "r.png"
        save_image(img, path)
        back = load_image(path)
        assert np.abs(back.pixels - img.pixels).max() <= 1.0 / 510.0 + 1e-7

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(OSError):
            load_image(tmp_path / "missing.png")

    def test_non_grayscale_rejected(self, tmp_path):
        from PIL import Image

        path = tmp_path / "rgb.png"
        Image.new("RGB", (32, 32)).save(path)
        with pytest.raises(FormatError):
            load_image(path)

    def test_garbage_bytes_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not an image at all")
        with pytest.raises(FormatError):
            load_image(path)


class TestRawIO:
    def test_lossless_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = UltrasoundImage(rng.random((36, 48)).astype(np.float32))
        path = tmp_path / "x.ild"
        save_raw(img, path)
        back = load_raw(path)
        assert (back.pixels == img.pixels).all()

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "bad.ild"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError):
            load_raw(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "t.ild"
        save_raw(_image(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            load_raw(path)

    def test_load_any_dispatch(self, tmp_path):
        img = _image(0.25)
        save_raw(img, tmp_path / "a.ild")
        save_image(img, tmp_path / "a.png")
        assert load_any(tmp_path / "a.ild").pixels[0, 0] == np.float32(0.25)
        assert abs(load_any(tmp_path / "a.png").pixels[0, 0] - 0.25) < 1 / 255


class TestPhantom:
    def test_deterministic(self):
        a = synth_clean_phantom(7, 64, 64)
        b = synth_clean_phantom(7, 64, 64)
        assert (a.pixels == b.pixels).all()

    def test_seed_changes_output(self):
        a = synth_clean_phantom(7, 64, 64)
        b = synth_clean_phantom(8, 64, 64)
        assert not (a.pixels == b.pixels).all()

    def test_range(self):
        img = synth_clean_phantom(3, 64, 64)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    @pytest.mark.parametrize("seed", [0, 11, 42])
    def test_anechoic_disk_darker_than_background(self, seed):
        h, w, n = 64, 64, 2
        layout = phantom_layout(seed, h, w, n)
        yy, xx = np.mgrid[0:h, 0:w]
        disk_mask = np.zeros((h, w), dtype=bool)
        for cy, cx in layout.disk_centers:
            disk_mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= layout.disk_radius**2
        wire_mask = np.zeros((h, w), dtype=bool)
        wire_mask[layout.wire_row, :] = True
        wire_mask[:, layout.wire_col] = True

        img = synth_clean_phantom(seed, h, w, n)
        background = ~disk_mask & ~wire_mask
        assert img.pixels[disk_mask].mean() < 0.3 * img.pixels[background].mean()

    def test_bright_wire_present(self):
        img = synth_clean_phantom(5, 64, 64, 0)
        row_means = img.pixels.mean(axis=1)
        col_means = img.pixels.mean(axis=0)
        assert row_means.max() > 1.5 * np.median(row_means)
        assert col_means.max() > 1.5 * np.median(col_means)

    def test_oversized_inclusion_rejected(self):
        with pytest.raises(ParameterError):
            synth_clean_phantom(0, 32, 32, 1, inclusion_radius=20)


class TestInterference:
    def test_identity_degradation(self):
        clean = synth_clean_phantom(0, 64, 64)
        cfg = InterferenceConfig(power_level=123, base_amplitude=0.0, broadband_sigma=0.0, seed=0)
        out = apply_hifu_interference(clean, cfg)
        assert (out.pixels == clean.pixels).all()

    def test_output_in_range(self):
        clean = synth_clean_phantom(0, 64, 64)
        cfg = InterferenceConfig(power_level=277, base_amplitude=0.5, broadband_sigma=0.3, seed=1)
        out = apply_hifu_interference(clean, cfg)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_amplitude_strictly_increasing_in_power(self):
        amps = [
            InterferenceConfig(power_level=p, base_amplitude=0.1).amplitude
            for p in POWER_LEVELS
        ]
        assert all(a < b for a, b in zip(amps, amps[1:]))

    def test_ssim_strictly_decreasing_in_power(self):
        clean = synth_clean_phantom(0, 64, 64)
        scores = []
        for p in POWER_LEVELS:
            cfg = InterferenceConfig(
                power_level=p, base_amplitude=0.1, broadband_sigma=0.05, seed=42
            )
            scores.append(sonodiff.ssim(apply_hifu_interference(clean, cfg), clean))
        assert all(a > b for a, b in zip(scores, scores[1:]))

    def test_bad_power_rejected(self):
        with pytest.raises(ParameterError):
            InterferenceConfig(power_level=150)

    def test_bad_frequency_rejected(self):
        with pytest.raises(ParameterError):
            InterferenceConfig(power_level=123, fringe_frequency=0.6)


def _session(cycles, frames_on=3, frames_off=1, drop_last_off=False):
    clean = _image(0.5)
    frames, labels = [], []
    for c in range(cycles):
        for _ in range(frames_on):
            frames.append(_image(0.4))
            labels.append(True)
        if drop_last_off and c == cycles - 1:
            continue
        for _ in range(frames_off):
            frames.append(clean)
            labels.append(False)
    return Session(
        frames=frames,
        hifu_on=labels,
        modality="DW",
        power_level=123,
        tissue_class="phantom",
        group_id="g0",
    )


class TestPairing:
    def test_25_cycles_give_50_pairs(self):
        result = make_pairs(_session(25))
        assert len(result.pairs) == 50
        assert result.skipped_cycles == 0

    def test_single_cycle_gives_two_pairs(self):
        result = make_pairs(_session(1))
        assert len(result.pairs) == 2

    def test_missing_off_segment_skipped_with_warning(self):
        result = make_pairs(_session(3, drop_last_off=True))
        assert len(result.pairs) == 4
        assert result.skipped_cycles == 1

    def test_single_on_frame_cycle_skipped(self):
        result = make_pairs(_session(2, frames_on=1))
        assert len(result.pairs) == 0
        assert result.skipped_cycles == 2

    def test_pairs_use_last_two_on_frames_and_first_off_frame(self):
        frames = [
            UltrasoundImage(np.full((16, 16), v, dtype=np.float32))
            for v in (0.1, 0.2, 0.3, 0.9, 0.8)
        ]
        session = Session(
            frames=frames,
            hifu_on=[True, True, True, False, False],
            modality="WB",
            power_level=167,
            tissue_class="ex_vivo",
            group_id="g1",
        )
        result = make_pairs(session)
        values = [(p.contaminated.pixels[0, 0], p.clean.pixels[0, 0]) for p in result.pairs]
        assert values == [(np.float32(0.2), np.float32(0.9)), (np.float32(0.3), np.float32(0.9))]

    def test_generated_session_pair_count(self):
        spec = DatasetSpec(n_sessions=3, cycles_per_session=25)
        session = build_session(spec, 0, seed=0)
        assert len(make_pairs(session).pairs) == 50


def _pairs_for_groups(sizes):
    pairs = []
    for g, size in enumerate(sizes):
        for _ in range(size):
            pairs.append(
                ImagePair(
                    contaminated=_image(0.4, 16, 16),
                    clean=_image(0.5, 16, 16),
                    modality=MODALITIES[g % 3],
                    power_level=POWER_LEVELS[g % 4],
                    tissue_class="phantom",
                    group_id=f"g{g}",
                )
            )
    return pairs


class TestSplit:
    def test_ten_equal_groups_split_6_2_2(self):
        split = split_dataset(_pairs_for_groups([4] * 10), seed=0)
        groups = lambda part: {p.group_id for p in part}
        assert len(groups(split.train)) == 6
        assert len(groups(split.validation)) == 2
        assert len(groups(split.test)) == 2

    def test_deterministic(self):
        pairs = _pairs_for_groups([3] * 10)
        a = split_dataset(pairs, seed=5)
        b = split_dataset(pairs, seed=5)
        assert [p.group_id for p in a.train] == [p.group_id for p in b.train]

    def test_group_disjoint(self):
        split = split_dataset(_pairs_for_groups([2, 3, 4, 5, 6, 7]), seed=1)
        tr = {p.group_id for p in split.train}
        va = {p.group_id for p in split.validation}
        te = {p.group_id for p in split.test}
        assert not (tr & va) and not (tr & te) and not (va & te)

    def test_too_few_groups(self):
        with pytest.raises(SplitError):
            split_dataset(_pairs_for_groups([5, 5]), seed=0)

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([5, 9, 10, 11, 15, 20]), st.integers(0, 1000))
    def test_ratios_within_tolerance(self, n_groups, seed):
        # group counts for which a 60/20/20 +/- 5pt equal-size assignment exists
        split = split_dataset(_pairs_for_groups([4] * n_groups), seed=seed)
        total = len(split.train) + len(split.validation) + len(split.test)
        for part, target in ((split.train, 0.6), (split.validation, 0.2), (split.test, 0.2)):
            assert abs(len(part) / total - target) <= 0.05 + 1e-9


class TestManifests:
    def test_roundtrip(self, tmp_path):
        records = [
            {
                "path_contaminated": "images/a.ild",
                "path_clean": "images/b.ild",
                "modality": "DW",
                "power": 123,
                "tissue": "phantom",
                "group": "g0",
            }
        ]
        path = tmp_path / "m.jsonl"
        write_manifest(path, records)
        assert read_manifest(path) == records

    def test_generate_dataset_layout(self, tmp_path):
        spec = DatasetSpec(n_sessions=5, cycles_per_session=2, height=32, width=32)
        counts = generate_dataset(tmp_path, seed=0, spec=spec, write_png=False)
        total = counts["train"] + counts["validation"] + counts["test"]
        assert total == 5 * 2 * 2  # 2 pairs per cycle
        pairs = load_manifest_pairs(tmp_path / "train.jsonl")
        assert pairs and pairs[0].contaminated.shape == (32, 32)
        # group disjointness across manifests
        groups = {}
        for name in ("train", "validation", "test"):
            groups[name] = {r["group"] for r in read_manifest(tmp_path / f"{name}.jsonl")}
        assert not (groups["train"] & groups["validation"])
        assert not (groups["train"] & groups["test"])
        assert not (groups["validation"] & groups["test"])
