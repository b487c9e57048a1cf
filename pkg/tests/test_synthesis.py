import hashlib
from pathlib import Path

import numpy as np
import pytest

from detcid.core import (
    GrayImage,
    InstanceMask,
    MaskStack,
    angular_difference,
    centroid,
    major_axis_angle,
    mask_iou,
    tight_bbox,
)
from detcid.errors import InvalidConfigError, NoBackgroundError, PlacementFailedError
from detcid.synthesis import (
    AnnotatedImage,
    SynthesisConfig,
    _quilt,
    add_cell,
    image_rng,
    inpaint_background,
    load_sample,
    quilt_texture,
    synthesize_dataset,
    synthesize_image,
)
from detcid.toydata import make_toy_image, make_toy_pool


def small_cfg(**kw) -> SynthesisConfig:
    base = dict(
        out_size=(96, 96),
        range_isolated=(1, 2),
        range_touching=(1, 1),
        range_crossing=(1, 1),
        quilt_window=48,
        quilt_block=24,
        quilt_overlap=6,
        rng_seed=0,
    )
    base.update(kw)
    return SynthesisConfig(**base)


@pytest.fixture(scope="module")
def pool():
    return make_toy_pool(3, rng_seed=11, shape=(96, 96))


class TestInpaint:
    def test_single_pixel_mask_changes_only_that_pixel(self):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32))
        m = np.zeros((32, 32), dtype=bool)
        m[16, 16] = True
        src = AnnotatedImage(GrayImage(img), MaskStack([InstanceMask(m)]))
        out = inpaint_background(src)
        assert np.array_equal(out.pixels[~m], img[~m])

    def test_constant_background_stays_constant(self):
        img = np.full((40, 40), 0.5)
        m = np.zeros((40, 40), dtype=bool)
        m[10:25, 12:30] = True
        src = AnnotatedImage(GrayImage(img), MaskStack([InstanceMask(m)]))
        out = inpaint_background(src)
        assert np.abs(out.pixels - 0.5).max() <= 1.0 / 255.0

    def test_textured_background_ring_statistics(self):
        # oracle: compare filled-region stats against a surrounding ring
        from scipy import ndimage

        rng = np.random.default_rng(5)
        ys, xs = np.mgrid[0:96, 0:96]
        img = np.clip(
            0.45 + 0.15 * xs / 95.0 + ndimage.uniform_filter(rng.normal(0, 0.3, (96, 96)), 3) * 0.2,
            0.0,
            1.0,
        )
        m = np.zeros((96, 96), dtype=bool)
        m[38:60, 30:64] = True
        src = AnnotatedImage(GrayImage(img), MaskStack([InstanceMask(m)]))
        out = inpaint_background(src)
        ring = ndimage.binary_dilation(m, iterations=6) & ~m
        fill_mean, fill_var = out.pixels[m].mean(), out.pixels[m].var()
        ring_mean, ring_var = img[ring].mean(), img[ring].var()
        assert abs(fill_mean - ring_mean) <= 0.2 * ring_mean
        assert abs(fill_var - ring_var) <= 0.2 * ring_var

    def test_fully_covered_image_rejected(self):
        src = AnnotatedImage(
            GrayImage(np.full((8, 8), 0.3)),
            MaskStack([InstanceMask(np.ones((8, 8), dtype=bool))]),
        )
        with pytest.raises(NoBackgroundError):
            inpaint_background(src)


class TestQuilt:
    def test_constant_patch_gives_constant_output(self):
        patch = GrayImage(np.full((24, 24), 0.7))
        out = quilt_texture(patch, (50, 61), block=12, overlap=3, rng=np.random.default_rng(0))
        assert out.shape == (50, 61)
        assert np.allclose(out.pixels, 0.7)

    def test_degenerate_quilting_is_exact_tiling(self):
        rng = np.random.default_rng(1)
        tile = rng.random((16, 16))
        out = quilt_texture(GrayImage(tile), (32, 32), block=16, overlap=0, rng=rng)
        np.testing.assert_allclose(out.pixels, np.tile(tile, (2, 2)))

    def test_output_size_exact_for_awkward_sizes(self):
        patch = GrayImage(np.random.default_rng(2).random((20, 20)))
        for size in [(33, 47), (14, 90), (64, 64)]:
            out = quilt_texture(patch, size, block=10, overlap=3, rng=np.random.default_rng(3))
            assert out.shape == size

    def test_block_larger_than_patch_rejected(self):
        with pytest.raises(InvalidConfigError):
            quilt_texture(GrayImage(np.zeros((8, 8))), (16, 16), block=9, overlap=2,
                          rng=np.random.default_rng(0))
        with pytest.raises(InvalidConfigError):
            quilt_texture(GrayImage(np.zeros((8, 8))), (16, 16), block=8, overlap=8,
                          rng=np.random.default_rng(0))

    def test_seam_cost_beats_random_straight_seam_baseline(self):
        # independent baseline: random block choice, straight seam mid-strip
        ys, xs = np.mgrid[0:32, 0:32]
        patch_arr = 0.5 + 0.45 * np.sin(xs * (2 * np.pi / 8.0))
        patch_arr = np.clip(patch_arr, 0.0, 1.0)
        block, overlap = 16, 4
        out_h = out_w = 48

        _, quilt_cost, _ = _quilt(patch_arr, out_h, out_w, block, overlap,
                                  np.random.default_rng(9))

        rng = np.random.default_rng(9)
        canvas = np.zeros((out_h, out_w))
        filled = np.zeros((out_h, out_w), dtype=bool)
        step = block - overlap
        positions = [0]
        while positions[-1] + block < out_h:
            positions.append(min(positions[-1] + step, out_h - block))
        base_cost = 0.0
        for by in positions:
            for bx in positions:
                si = int(rng.integers(patch_arr.shape[0] - block + 1))
                sj = int(rng.integers(patch_arr.shape[1] - block + 1))
                new = patch_arr[si : si + block, sj : sj + block]
                region = (slice(by, by + block), slice(bx, bx + block))
                mask = filled[region]
                if mask[:, 0].all():
                    col_full = mask.all(axis=0)
                    ov_w = int(np.argmin(col_full)) if not col_full.all() else block
                    col = ov_w // 2
                    base_cost += float(
                        np.sum((canvas[by : by + block, bx + col] - new[:, col]) ** 2)
                    )
                if mask[0, :].all():
                    row_full = mask.all(axis=1)
                    ov_h = int(np.argmin(row_full)) if not row_full.all() else block
                    row = ov_h // 2
                    base_cost += float(
                        np.sum((canvas[by + row, bx : bx + block] - new[row, :]) ** 2)
                    )
                canvas[region] = new
                filled[region] = True
        assert quilt_cost <= base_cost

    def test_histogram_close_to_patch(self):
        rng = np.random.default_rng(4)
        from scipy import ndimage

        patch_arr = np.clip(0.5 + ndimage.uniform_filter(rng.normal(0, 0.4, (32, 32)), 3), 0, 1)
        out = quilt_texture(GrayImage(patch_arr), (80, 80), block=16, overlap=4,
                            rng=np.random.default_rng(5))
        h1, _ = np.histogram(patch_arr, bins=16, range=(0, 1), density=False)
        h2, _ = np.histogram(out.pixels, bins=16, range=(0, 1), density=False)
        l1 = np.abs(h1 / h1.sum() - h2 / h2.sum()).sum()
        assert l1 <= 0.25


class TestAddCell:
    def test_all_randomness_disabled_is_pixel_exact(self, pool):
        src = pool[0]
        cfg = small_cfg(shear_base=0.0, shear_scale=0.0, out_size=(96, 96))
        for i in range(src.n_cells):
            mask = src.masks.masks[i]
            theta = major_axis_angle(mask)
            cx, cy = centroid(mask)
            canvas = GrayImage(np.zeros((96, 96)))
            _, placed = add_cell(src, i, canvas, theta, cx, cy, cfg,
                                 np.random.default_rng(0))
            assert np.array_equal(placed.pixels, mask.pixels)

    def test_centroid_lands_within_one_pixel(self, pool):
        src = pool[1]
        cfg = small_cfg(out_size=(128, 128))
        rng = np.random.default_rng(8)
        canvas = GrayImage(np.zeros((128, 128)))
        for _ in range(20):
            rec = {}
            x, y = rng.uniform(25, 100, 2)
            _, placed = add_cell(src, int(rng.integers(src.n_cells)), canvas,
                                 float(rng.uniform(0, 180)), x, y, cfg, rng, record=rec)
            px, py = centroid(placed)
            assert abs(px - rec["corrected_x"]) <= 1.0
            assert abs(py - rec["corrected_y"]) <= 1.0

    def test_angle_lands_within_three_degrees_for_elongated_cells(self, pool):
        src = pool[2]
        cfg = small_cfg(out_size=(128, 128))
        rng = np.random.default_rng(9)
        canvas = GrayImage(np.zeros((128, 128)))
        rods = [i for i, lbl in enumerate(src.masks.class_labels) if lbl == "vegetative"]
        for _ in range(30):
            theta = float(rng.uniform(0, 180))
            i = rods[int(rng.integers(len(rods)))]
            _, placed = add_cell(src, i, canvas, theta,
                                 float(rng.uniform(30, 98)), float(rng.uniform(30, 98)),
                                 cfg, rng)
            assert angular_difference(major_axis_angle(placed), theta) <= 3.0

    def test_out_of_frame_placement_is_corrected_inside(self, pool):
        src = pool[0]
        cfg = small_cfg(out_size=(96, 96))
        canvas = GrayImage(np.zeros((96, 96)))
        rec = {}
        _, placed = add_cell(src, 0, canvas, 45.0, 1.0, 1.0, cfg,
                             np.random.default_rng(1), record=rec)
        assert not placed.is_empty()
        assert rec["corrected_x"] > rec["requested_x"]
        assert rec["corrected_y"] > rec["requested_y"]

    def test_degenerate_transform_raises_after_retry(self):
        # a 1-px cell collapsed by a near-zero scale cannot be placed
        img = np.full((16, 16), 0.5)
        m = np.zeros((16, 16), dtype=bool)
        m[8, 8] = True
        src = AnnotatedImage(GrayImage(img), MaskStack([InstanceMask(m)]))
        cfg = small_cfg(out_size=(96, 96), shear_scale=0.999)
        failed = False
        rng = np.random.default_rng(2)
        for _ in range(200):
            try:
                add_cell(src, 0, GrayImage(np.zeros((96, 96))), 0.0, 48.0, 48.0, cfg, rng)
            except PlacementFailedError:
                failed = True
                break
        assert failed

    def test_bad_cell_index_rejected(self, pool):
        cfg = small_cfg()
        with pytest.raises(InvalidConfigError):
            add_cell(pool[0], 99, GrayImage(np.zeros((96, 96))), 0.0, 10, 10, cfg,
                     np.random.default_rng(0))


class TestSynthesizeImage:
    def test_single_isolated_cell(self, pool):
        cfg = small_cfg(range_isolated=(1, 1), range_touching=(0, 0), range_crossing=(0, 0))
        s = synthesize_image(pool, cfg, np.random.default_rng(0))
        assert len(s.truth) == 1
        assert s.provenance["counts"] == {"isolated": 1, "touching": 0, "crossing": 0}

    def test_touching_pair_geometry(self, pool):
        cfg = small_cfg(range_isolated=(0, 0), range_touching=(1, 1), range_crossing=(0, 0),
                        out_size=(128, 128))
        for seed in range(6):
            s = synthesize_image(pool, cfg, np.random.default_rng(seed))
            if s.provenance["skips"]:
                continue
            assert len(s.truth) == 2
            second = next(p for p in s.provenance["placements"] if p["kind"] == "touching_second")
            omega = second["pair"]["omega"]
            dx = abs(second["requested_x"] - second["pair"]["anchor_x"])
            assert omega / 2.0 <= dx <= omega
            # pair is adjacent: overlapping or within omega horizontally
            a, b = s.truth.masks
            ba, bb = tight_bbox(a), tight_bbox(b)
            assert mask_iou(a, b) > 0 or abs(ba.cx - bb.cx) <= 2 * omega

    def test_crossing_pair_angles(self, pool):
        cfg = small_cfg(range_isolated=(0, 0), range_touching=(0, 0), range_crossing=(1, 1),
                        out_size=(160, 160), max_angle_jitter_deg=10.0)
        checked = 0
        for seed in range(8):
            s = synthesize_image(pool, cfg, np.random.default_rng(seed))
            if s.provenance["skips"] or len(s.truth) != 2:
                continue
            a1 = major_axis_angle(s.truth.masks[0])
            a2 = major_axis_angle(s.truth.masks[1])
            assert abs(angular_difference(a1, a2) - 90.0) <= cfg.max_angle_jitter_deg + 3.0
            checked += 1
        assert checked >= 4

    def test_noise_free_touching_offset_is_purely_horizontal(self, pool):
        cfg = small_cfg(range_isolated=(0, 0), range_touching=(1, 1), range_crossing=(0, 0),
                        shear_base=0.0, shear_scale=0.0, max_vertical_shift=0.0,
                        max_horizontal_shift=0.0, max_angle_jitter_deg=0.0,
                        out_size=(128, 128))
        s = synthesize_image(pool, cfg, np.random.default_rng(4))
        second = next(p for p in s.provenance["placements"] if p["kind"] == "touching_second")
        assert second["requested_y"] == second["pair"]["anchor_y"]
        dx = abs(second["requested_x"] - second["pair"]["anchor_x"])
        omega = second["pair"]["omega"]
        assert omega / 2.0 <= dx <= omega

    def test_truth_masks_nonempty_and_in_bounds(self, pool):
        cfg = small_cfg(out_size=(128, 160))
        for seed in range(5):
            s = synthesize_image(pool, cfg, np.random.default_rng(seed))
            o, t, c = (s.provenance["counts"][k] for k in ("isolated", "touching", "crossing"))
            assert len(s.truth) + len(s.provenance["skips"]) == o + 2 * t + 2 * c
            for m in s.truth.masks:
                assert m.shape == (128, 160)
                assert not m.is_empty()

    def test_empty_pool_rejected(self):
        with pytest.raises(InvalidConfigError):
            synthesize_image([], small_cfg(), np.random.default_rng(0))


def _tree_hash(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestSynthesizeDataset:
    def test_deterministic_regeneration(self, pool, tmp_path):
        cfg = small_cfg(rng_seed=77)
        a, b = tmp_path / "a", tmp_path / "b"
        synthesize_dataset(pool, cfg, 3, a)
        synthesize_dataset(pool, cfg, 3, b)
        ha, hb = _tree_hash(a), _tree_hash(b)
        assert ha == hb and len(ha) > 6

    def test_worker_count_does_not_change_bytes(self, pool, tmp_path):
        cfg = small_cfg(rng_seed=13)
        a, b = tmp_path / "w1", tmp_path / "w2"
        synthesize_dataset(pool, cfg, 4, a, workers=1)
        synthesize_dataset(pool, cfg, 4, b, workers=2)
        assert _tree_hash(a) == _tree_hash(b)

    def test_manifest_and_round_trip(self, pool, tmp_path):
        cfg = small_cfg(rng_seed=3)
        manifest = synthesize_dataset(pool, cfg, 2, tmp_path / "ds")
        assert manifest["count"] == 2
        assert len(manifest["images"]) == 2
        image, truth, record = load_sample(tmp_path / "ds", "000000")
        assert image.shape == tuple(cfg.out_size)
        assert len(truth) == len(record["instances"])
        assert all(not m.is_empty() for m in truth.masks)

    def test_per_image_streams_are_independent(self):
        a = image_rng(5, 0).random(4)
        b = image_rng(5, 1).random(4)
        assert not np.allclose(a, b)


class TestSynthesisConfig:
    def test_defaults_match_contract(self):
        cfg = SynthesisConfig()
        assert cfg.out_size == (411, 711)
        assert cfg.quilt_window == 64
        assert cfg.quilt_block == 32
        assert cfg.quilt_overlap == 8
        assert cfg.max_vertical_shift == 10.0
        assert cfg.max_horizontal_shift == 10.0
        assert cfg.max_angle_jitter_deg == 15.0
        assert cfg.shear_scale == 0.1
        assert cfg.shear_base == 0.0
        assert cfg.range_isolated == (2, 4)

    def test_validation(self):
        with pytest.raises(InvalidConfigError):
            SynthesisConfig(quilt_overlap=32, quilt_block=32)
        with pytest.raises(InvalidConfigError):
            SynthesisConfig(max_vertical_shift=-1)
        with pytest.raises(InvalidConfigError):
            SynthesisConfig(range_touching=(3, 2))
        with pytest.raises(InvalidConfigError):
            SynthesisConfig.from_dict({"quilt_windw": 32})

    def test_dict_round_trip(self):
        cfg = SynthesisConfig(out_size=(100, 120), rng_seed=9)
        assert SynthesisConfig.from_dict(cfg.to_dict()) == cfg
