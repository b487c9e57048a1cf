import numpy as np
import pytest

from detcid.core import (
    AffineTransform,
    BoundingBox,
    GrayImage,
    InstanceMask,
    MaskStack,
    angular_difference,
    centroid,
    major_axis_angle,
    mask_iou,
    tight_bbox,
    warp_affine,
)
from detcid.errors import (
    DegenerateMaskError,
    EmptyMaskError,
    InvalidTransformError,
    ShapeMismatchError,
)


def make_mask(shape, coords):
    m = np.zeros(shape, dtype=bool)
    for y, x in coords:
        m[y, x] = True
    return InstanceMask(m)


class TestWarpAffine:
    def test_identity_returns_same_image(self):
        img = GrayImage(np.linspace(0, 1, 12 * 10).reshape(12, 10))
        out = warp_affine(img, AffineTransform.identity(), (12, 10))
        np.testing.assert_allclose(out.pixels, img.pixels)

    def test_pure_translation_moves_pixel(self):
        a = np.zeros((32, 32))
        a[10, 10] = 1.0  # (x=10, y=10)
        out = warp_affine(GrayImage(a), AffineTransform.translation(5, 3), (32, 32))
        assert out.pixels[13, 15] == 1.0
        assert out.pixels.sum() == 1.0

    def test_rotation_matches_per_pixel_oracle(self):
        # Oracle: push every output pixel through the inverse map by hand and
        # read the nearest source pixel (the rotation maps centers exactly).
        ramp = np.arange(16, dtype=np.float64).reshape(4, 4) / 15.0
        t = AffineTransform.rotation_deg(90.0, center=(1.5, 1.5))
        out = warp_affine(GrayImage(ramp), t, (4, 4))
        inv = np.linalg.inv(t.matrix)
        expected = np.zeros((4, 4))
        for y in range(4):
            for x in range(4):
                sx, sy, _ = inv @ np.array([x, y, 1.0])
                expected[y, x] = ramp[int(round(sy)), int(round(sx))]
        np.testing.assert_allclose(out.pixels, expected, atol=1e-12)

    def test_mask_warp_is_binary(self):
        m = make_mask((16, 16), [(y, x) for y in range(4, 9) for x in range(3, 12)])
        out = warp_affine(m, AffineTransform.rotation_deg(37.0, center=(8, 8)), (16, 16))
        assert out.pixels.dtype == np.bool_

    def test_round_trip_exact_for_lattice_transforms(self):
        # integer translations and quarter turns hit pixel centers exactly
        rng = np.random.default_rng(7)
        img = GrayImage(rng.random((24, 24)))
        for t in (
            AffineTransform.translation(4, -3),
            AffineTransform.rotation_deg(90.0, center=(11.5, 11.5)),
        ):
            fwd = warp_affine(img, t, (24, 24))
            back = warp_affine(fwd, t.inverse(), (24, 24))
            inv = t.matrix
            ys, xs = np.mgrid[0:24, 0:24]
            fx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
            fy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
            stayed = (fx >= 0) & (fx <= 23) & (fy >= 0) & (fy <= 23)
            np.testing.assert_allclose(back.pixels[stayed], img.pixels[stayed], atol=1e-12)

    def test_round_trip_within_quantum_on_smooth_image(self):
        # bilinear interpolation reproduces planes exactly, so a ramp must
        # survive an arbitrary rotation round trip within one 8-bit quantum
        ys, xs = np.mgrid[0:24, 0:24]
        img = GrayImage((xs + 2.0 * ys) / (23.0 * 3))
        t = AffineTransform.rotation_deg(33.0, center=(11.5, 11.5))
        fwd = warp_affine(img, t, (24, 24))
        back = warp_affine(fwd, t.inverse(), (24, 24))
        # back[p] reads fwd near T(p); those intermediate pixels are only
        # trustworthy when their own samples stayed interior, so keep a
        # margin on both p and T(p)
        m = t.matrix
        qx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
        qy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
        stayed = (
            (xs >= 3) & (xs <= 20) & (ys >= 3) & (ys <= 20)
            & (qx >= 2) & (qx <= 21) & (qy >= 2) & (qy <= 21)
        )
        assert stayed.sum() > 100
        assert np.abs(back.pixels - img.pixels)[stayed].max() <= 1.0 / 255.0

    def test_mask_round_trip_exact_for_integer_translation(self):
        m = make_mask((20, 20), [(y, x) for y in range(5, 12) for x in range(4, 9)])
        t = AffineTransform.translation(3, 2)
        back = warp_affine(warp_affine(m, t, (20, 20)), t.inverse(), (20, 20))
        assert np.array_equal(back.pixels, m.pixels)

    def test_non_invertible_transform_rejected(self):
        with pytest.raises(InvalidTransformError):
            AffineTransform(np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 0, 1.0]]))


class TestCentroid:
    def test_single_pixel(self):
        m = make_mask((10, 10), [(5, 3)])  # row 5, col 3 -> (x=3, y=5)
        assert centroid(m) == (3.0, 5.0)

    def test_symmetric_block(self):
        m = make_mask((6, 6), [(0, 0), (0, 1), (1, 0), (1, 1)])
        assert centroid(m) == (0.5, 0.5)

    def test_l_shape_matches_hand_sum(self):
        coords = [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)]
        m = make_mask((5, 5), coords)
        xs = [c for _, c in coords]
        ys = [r for r, _ in coords]
        assert centroid(m) == (sum(xs) / 5, sum(ys) / 5)

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            centroid(InstanceMask(np.zeros((4, 4), bool)))

    def test_warped_centroid_tracks_transform(self):
        m = make_mask((40, 40), [(y, x) for y in range(10, 16) for x in range(8, 26)])
        t = AffineTransform.rotation_deg(25.0, center=(20, 20)) @ AffineTransform.translation(3, 1)
        warped = warp_affine(m, t, (40, 40))
        cx, cy = centroid(m)
        ex, ey = t.apply(cx, cy)
        wx, wy = centroid(warped)
        assert abs(wx - ex) <= 1.0 and abs(wy - ey) <= 1.0


class TestMajorAxisAngle:
    def test_horizontal_bar(self):
        m = make_mask((3, 12), [(1, x) for x in range(1, 11)])
        assert major_axis_angle(m) == 0.0

    def test_vertical_bar(self):
        m = make_mask((12, 3), [(y, 1) for y in range(1, 11)])
        assert major_axis_angle(m) == 90.0

    def test_diagonal_line_oracle(self):
        # covariance of {(i, i)} is [[v, v], [v, v]]; leading eigenvector (1, 1)
        m = make_mask((10, 10), [(i, i) for i in range(10)])
        assert abs(major_axis_angle(m) - 45.0) < 1e-6

    def test_isotropic_mask_returns_zero(self):
        m = make_mask((8, 8), [(2, 2), (2, 4), (4, 2), (4, 4)])
        assert major_axis_angle(m) == 0.0

    def test_degenerate_masks_raise(self):
        with pytest.raises(DegenerateMaskError):
            major_axis_angle(make_mask((4, 4), [(1, 1)]))
        with pytest.raises(DegenerateMaskError):
            major_axis_angle(InstanceMask(np.zeros((4, 4), bool)))

    def test_translation_invariance(self):
        coords = [(y, x) for y in range(3, 6) for x in range(2, 14)]
        a = make_mask((30, 30), coords)
        b = make_mask((30, 30), [(y + 9, x + 11) for y, x in coords])
        assert major_axis_angle(a) == major_axis_angle(b)

    @pytest.mark.parametrize("rot", [10.0, 45.0, 77.0, 120.0, 165.0])
    def test_rotation_shifts_angle(self, rot):
        # elongated bar, aspect ratio 4
        m = make_mask((48, 48), [(y, x) for y in range(22, 26) for x in range(16, 32)])
        base = major_axis_angle(m)
        r = warp_affine(m, AffineTransform.rotation_deg(rot, center=(23.5, 23.5)), (48, 48))
        assert angular_difference(major_axis_angle(r), base + rot) <= 2.0


class TestMaskIoU:
    def test_identical_masks(self):
        m = make_mask((8, 8), [(2, 2), (2, 3), (3, 2)])
        assert mask_iou(m, m) == 1.0

    def test_disjoint_masks(self):
        a = make_mask((8, 8), [(0, 0)])
        b = make_mask((8, 8), [(7, 7)])
        assert mask_iou(a, b) == 0.0

    def test_partial_overlap_pixel_count(self):
        a = InstanceMask(np.zeros((8, 8), bool))
        b = InstanceMask(np.zeros((8, 8), bool))
        pa = np.zeros((8, 8), bool)
        pa[0:2, 0:4] = True
        pb = np.zeros((8, 8), bool)
        pb[0:2, 2:6] = True
        a, b = InstanceMask(pa), InstanceMask(pb)
        assert mask_iou(a, b) == pytest.approx(4 / 12)

    def test_both_empty_is_zero(self):
        e = InstanceMask(np.zeros((4, 4), bool))
        assert mask_iou(e, e) == 0.0

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            a = InstanceMask(rng.random((10, 10)) > 0.6)
            b = InstanceMask(rng.random((10, 10)) > 0.6)
            v = mask_iou(a, b)
            assert v == mask_iou(b, a)
            assert 0.0 <= v <= 1.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeMismatchError):
            mask_iou(InstanceMask(np.zeros((4, 4), bool)), InstanceMask(np.zeros((5, 4), bool)))


class TestTightBbox:
    def test_single_pixel(self):
        bb = tight_bbox(make_mask((10, 10), [(5, 3)]))
        assert (bb.cx, bb.cy, bb.width, bb.height) == (3.0, 5.0, 1.0, 1.0)

    def test_block(self):
        bb = tight_bbox(make_mask((10, 10), [(y, x) for y in range(2, 4) for x in range(1, 5)]))
        assert (bb.width, bb.height) == (4.0, 2.0)

    def test_diagonal_line(self):
        bb = tight_bbox(make_mask((12, 12), [(i, i) for i in range(10)]))
        assert (bb.width, bb.height) == (10.0, 10.0)

    def test_empty_raises(self):
        with pytest.raises(EmptyMaskError):
            tight_bbox(InstanceMask(np.zeros((3, 3), bool)))


class TestTypes:
    def test_gray_image_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            GrayImage(np.full((4, 4), 1.5))
        with pytest.raises(ValueError):
            GrayImage(np.full((4, 4), np.nan))

    def test_mask_stack_checks_labels_and_shapes(self):
        m = InstanceMask(np.ones((4, 4), bool))
        stack = MaskStack([m, m], ["vegetative", "spore"])
        assert len(stack) == 2
        with pytest.raises(ShapeMismatchError):
            MaskStack([m], ["vegetative", "spore"])
        with pytest.raises(ValueError):
            MaskStack([m], ["nucleus"])

    def test_bounding_box_rejects_degenerate(self):
        from detcid.errors import InvalidBoxError

        with pytest.raises(InvalidBoxError):
            BoundingBox(0, 0, 0.0, 2.0)

    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        img = GrayImage(np.floor(rng.random((9, 13)) * 255.0 + 0.5) / 255.0)
        p = tmp_path / "img.png"
        img.save_png(p)
        back = GrayImage.load_png(p)
        np.testing.assert_allclose(back.pixels, img.pixels, atol=1 / 255 / 2)

        m = InstanceMask(rng.random((9, 13)) > 0.5)
        q = tmp_path / "mask.png"
        m.save_png(q)
        assert np.array_equal(InstanceMask.load_png(q).pixels, m.pixels)
