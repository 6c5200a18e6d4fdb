import json
import math

import numpy as np
import pytest

from vtssi.data import (DataConfig, DatasetError, PlacementError, Sprite, bounce_limits, composite,
                        elliptic_trajectory, gen_sequence, generate, linear_offsets, load_annotations,
                        load_frames, plan_sequence, read_dataset, read_manifest, reduced_data_config,
                        render_sprite, sequence_seed, write_dataset)


def reference_stepper(x0, v, steps, lo, hi):
    """Scalar straight-line motion that reverses when the next point leaves [lo, hi]."""
    xs = [x0]
    x = x0
    for _ in range(steps - 1):
        if lo <= x + v <= hi:
            x = x + v
        else:
            v = -v
            x = min(max(x + v, lo), hi)
        xs.append(x)
    return xs


def tight_bbox_center(img):
    ys, xs = np.nonzero(img > 0)
    return np.array([(xs.min() + xs.max()) / 2, (ys.min() + ys.max()) / 2])


def square(n=4, value=1.0):
    return Sprite(np.full((n, n), value))


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        cfg = DataConfig(frame_hw=(32, 32), seq_len=6, sprite_size=(5, 9))
        rng = np.random.default_rng(0)
        for seed in rng.integers(0, 2 ** 31, size=1000):
            f1, a1 = gen_sequence(cfg, int(seed))
            f2, a2 = gen_sequence(cfg, int(seed))
            assert np.array_equal(f1, f2)
            assert np.array_equal(a1.centers, a2.centers)

    def test_child_seeds_differ_by_index(self):
        assert sequence_seed(0, 1) != sequence_seed(0, 2)
        assert sequence_seed(0, 1) == sequence_seed(0, 1)

    def test_parallel_matches_serial(self):
        cfg = DataConfig(frame_hw=(24, 24), seq_len=4, sprite_size=(4, 8), seed=3)
        serial = [f for f, _ in generate(cfg, 20)]
        parallel = [f for f, _ in generate(cfg, 20, workers=2)]
        for a, b in zip(serial, parallel):
            assert np.array_equal(a, b)


class TestSequences:
    def test_zero_objects(self):
        cfg = DataConfig(max_objects=0, seq_len=5)
        frames, ann = gen_sequence(cfg, 1)
        assert ann.count == 0 and ann.centers.shape == (5, 0, 2)
        assert not frames.any()

    def test_zero_velocity_constant(self):
        cfg = DataConfig(min_objects=1, max_objects=1, speed_range=(0.0, 0.0), seq_len=7)
        frames, ann = gen_sequence(cfg, 5)
        for t in range(1, 7):
            assert np.array_equal(frames[t], frames[0])
        np.testing.assert_array_equal(ann.centers, np.repeat(ann.centers[:1], 7, axis=0))

    def test_counts_cover_range(self):
        cfg = DataConfig(frame_hw=(32, 32), seq_len=2, sprite_size=(5, 8))
        counts = {gen_sequence(cfg, s)[1].count for s in range(60)}
        assert counts == {0, 1, 2}

    def test_in_frame_under_appearance_bounce(self):
        cfg = DataConfig(frame_hw=(32, 32), seq_len=12, sprite_size=(6, 12), speed_range=(1, 4))
        for i in range(1000):
            plan = plan_sequence(cfg, sequence_seed(7, i))
            for sp, offs in zip(plan.sprites, plan.offsets):
                for off in offs:
                    # bilinear rendering conserves mass, so no clipping means every pixel landed in-frame
                    np.testing.assert_allclose(render_sprite(sp, off, cfg.frame_hw).sum(), sp.raster.sum(),
                                               rtol=1e-12)

    def test_elliptic_in_frame(self):
        cfg = DataConfig(frame_hw=(32, 32), seq_len=20, motion="elliptic", sprite_size=(6, 10))
        for i in range(200):
            plan = plan_sequence(cfg, sequence_seed(8, i))
            for sp, offs in zip(plan.sprites, plan.offsets):
                lo, hi = sp.offset_range(cfg.frame_hw)
                assert np.all(offs >= lo - 1e-9) and np.all(offs <= hi + 1e-9)

    def test_first_frame_never_overlaps(self):
        cfg = DataConfig(frame_hw=(28, 28), seq_len=3, min_objects=2, max_objects=2, sprite_size=(8, 12))
        for i in range(500):
            plan = plan_sequence(cfg, sequence_seed(9, i))
            a, b = (render_sprite(sp, offs[0], cfg.frame_hw) for sp, offs in zip(plan.sprites, plan.offsets))
            assert not np.any((a > 0) & (b > 0))

    def test_overlap_allowed_when_requested(self):
        cfg = DataConfig(frame_hw=(20, 20), seq_len=1, min_objects=2, max_objects=2, sprite_size=(10, 12),
                         overlap_first_frame=True)
        overlapping = 0
        for i in range(100):
            plan = plan_sequence(cfg, i)
            a, b = (render_sprite(sp, offs[0], cfg.frame_hw) for sp, offs in zip(plan.sprites, plan.offsets))
            overlapping += bool(np.any((a > 0) & (b > 0)))
        assert overlapping > 0

    def test_placement_budget_exhausted(self):
        cfg = DataConfig(frame_hw=(12, 12), seq_len=1, min_objects=2, max_objects=2, sprite_size=(11, 12),
                         placement_retries=5)
        with pytest.raises(PlacementError):
            gen_sequence(cfg, 0)

    def test_annotated_centers_match_rendered_bbox(self):
        cfg = DataConfig(frame_hw=(40, 40), seq_len=10, sprite_size=(5, 14))
        for i in range(200):
            plan = plan_sequence(cfg, sequence_seed(10, i))
            _, ann = gen_sequence(cfg, sequence_seed(10, i))
            for k, (sp, offs) in enumerate(zip(plan.sprites, plan.offsets)):
                for t in range(cfg.seq_len):
                    c = tight_bbox_center(render_sprite(sp, offs[t], cfg.frame_hw))
                    assert np.abs(c - ann.centers[t, k]).max() <= 0.75

    def test_clamped_composite(self):
        a = np.full((3, 3), 0.7)
        out = composite([a, a], (3, 3))
        np.testing.assert_array_equal(out, np.ones((3, 3)))
        np.testing.assert_array_equal(composite([], (2, 2)), np.zeros((2, 2)))


class TestRendering:
    def test_integer_offset_is_exact_shift(self):
        rng = np.random.default_rng(0)
        sp = Sprite(rng.uniform(0.1, 1, (5, 4)))
        base = render_sprite(sp, (3, 2), (16, 16))
        np.testing.assert_array_equal(base[2:7, 3:7], sp.raster)
        assert base.sum() == pytest.approx(sp.raster.sum(), rel=1e-12)
        moved = render_sprite(sp, (3 + 4, 2 + 5), (16, 16))
        np.testing.assert_array_equal(moved, np.roll(np.roll(base, 5, axis=0), 4, axis=1))

    def test_half_pixel_blend(self):
        sp = Sprite(np.ones((1, 1)))
        out = render_sprite(sp, (2.5, 1.0), (4, 5))
        np.testing.assert_allclose(out[1, 2:4], [0.5, 0.5])
        assert out.sum() == pytest.approx(1.0)

    def test_clipped_outside(self):
        out = render_sprite(square(), (-2, -2), (6, 6))
        np.testing.assert_array_equal(out[:2, :2], np.ones((2, 2)))
        assert out.sum() == 4


class TestLinearMotion:
    def test_reference_stepper_agreement(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            lo, hi = rng.uniform(-5, 0, 2), rng.uniform(10, 30, 2)
            x0 = rng.uniform(lo, hi)
            v = rng.uniform(-4, 4, 2)
            out = linear_offsets(x0, v, 25, lo, hi)
            for a in range(2):
                assert out[:, a].tolist() == reference_stepper(x0[a], v[a], 25, lo[a], hi[a])

    def test_bounce_off_right_wall(self):
        sp = square(4)
        lo, hi = bounce_limits(sp, (20, 20), "appearance", 0)
        start = np.array([hi[0] - 3, 5.0])
        out = linear_offsets(start, np.array([2.0, 0.0]), 5, lo, hi)
        # step 1 still fits, step 2 would push a pixel out, so it reverses
        np.testing.assert_array_equal(out[:, 0], [hi[0] - 3, hi[0] - 1, hi[0] - 3, hi[0] - 5, hi[0] - 7])
        np.testing.assert_array_equal(out[:, 1], 5.0)

    def test_bbox_corner_lets_sprite_exit(self):
        sp = square(6)
        lo, hi = bounce_limits(sp, (20, 20), "bbox_corner", 0)
        np.testing.assert_array_equal(lo, [0, 0])
        np.testing.assert_array_equal(hi, [19, 19])
        a_lo, a_hi = bounce_limits(sp, (20, 20), "appearance", 0)
        assert np.all(a_hi < hi)

    def test_margin_widens_limits(self):
        sp = square(4)
        lo, hi = bounce_limits(sp, (20, 20), "bbox_corner", 3)
        np.testing.assert_array_equal(lo, [-3, -3])
        np.testing.assert_array_equal(hi, [22, 22])


class TestElliptic:
    def test_degenerate(self):
        p = {"center": [5.0, 6.0], "a": 0.0, "b": 0.0, "phase": 0.3, "omega": 0.2}
        np.testing.assert_array_equal(elliptic_trajectory(p, np.arange(10)), np.tile([5.0, 6.0], (10, 1)))

    def test_periodic(self):
        T = 20
        p = {"center": [10.0, 12.0], "a": 4.0, "b": 3.0, "phase": 0.7, "omega": 2 * math.pi / T}
        np.testing.assert_allclose(elliptic_trajectory(p, T), elliptic_trajectory(p, 0), atol=1e-9)

    def test_closed_form(self):
        p = {"center": [0.0, 0.0], "a": 10.0, "b": 5.0, "phase": 0.0, "omega": 0.1}
        np.testing.assert_allclose(elliptic_trajectory(p, 7), [10 * math.cos(0.7), 5 * math.sin(0.7)],
                                   atol=1e-12)


class TestDatasetIO:
    def make(self, tmp_path, n=6):
        cfg = DataConfig(frame_hw=(16, 16), seq_len=5, sprite_size=(3, 6), seed=4)
        write_dataset(cfg, n, tmp_path / "d")
        return cfg, tmp_path / "d"

    def test_round_trip(self, tmp_path):
        cfg, d = self.make(tmp_path)
        m = read_manifest(d)
        assert m["shape"] == [6, 5, 16, 16] and m["format_version"] == "1"
        loaded = list(read_dataset(d))
        for (f, a), (g, b) in zip(generate(cfg, 6), loaded):
            np.testing.assert_allclose(f, g, atol=0.5 / 255 + 1e-12)
            np.testing.assert_allclose(a.centers, b.centers, atol=0)
            assert a.count == b.count and a.seed == b.seed

    def test_byte_identical_rewrite(self, tmp_path):
        cfg, d = self.make(tmp_path)
        write_dataset(cfg, 6, tmp_path / "e")
        for name in ("frames.bin", "annotations.jsonl", "manifest.json"):
            assert (d / name).read_bytes() == (tmp_path / "e" / name).read_bytes()

    def test_corrupt_frames_detected(self, tmp_path):
        _, d = self.make(tmp_path)
        raw = bytearray((d / "frames.bin").read_bytes())
        raw[-1] ^= 0xFF
        (d / "frames.bin").write_bytes(bytes(raw))
        with pytest.raises(DatasetError):
            load_frames(d)

    def test_truncated_frames_detected(self, tmp_path):
        _, d = self.make(tmp_path)
        raw = (d / "frames.bin").read_bytes()
        (d / "frames.bin").write_bytes(raw[:-10])
        with pytest.raises(DatasetError):
            load_frames(d)

    def test_version_mismatch(self, tmp_path):
        _, d = self.make(tmp_path)
        m = json.loads((d / "manifest.json").read_text())
        m["format_version"] = "99"
        (d / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(DatasetError):
            read_manifest(d)

    def test_annotation_count_mismatch(self, tmp_path):
        _, d = self.make(tmp_path)
        lines = (d / "annotations.jsonl").read_text().splitlines()
        (d / "annotations.jsonl").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetError):
            load_annotations(d)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            read_manifest(tmp_path)


class TestConfig:
    def test_reduced_preset(self):
        cfg = reduced_data_config()
        assert cfg.frame_hw == (32, 32) and cfg.seq_len == 12 and cfg.min_objects == 1

    def test_invalid(self):
        with pytest.raises(ValueError):
            DataConfig(seq_len=0)
        with pytest.raises(ValueError):
            DataConfig(min_objects=3, max_objects=2)

    def test_image_bank(self, tmp_path):
        bank = np.zeros((3, 8, 8), dtype=np.uint8)
        bank[:, 2:6, 3:5] = 255
        np.save(tmp_path / "bank.npy", bank)
        cfg = DataConfig(frame_hw=(20, 20), seq_len=3, min_objects=1, max_objects=1,
                         sprite_source="image_bank", image_bank=str(tmp_path / "bank.npy"))
        frames, ann = gen_sequence(cfg, 0)
        assert frames.max() == pytest.approx(1.0) and ann.count == 1
