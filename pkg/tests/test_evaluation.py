import numpy as np
import pytest

from detcid.core import InstanceMask, MaskStack
from detcid.detection import detections_to_json, rle_encode
from detcid.errors import InvalidConfigError, ShapeMismatchError
from detcid.evaluation import (
    BlandAltman,
    NoOverlapError,
    aggregate,
    average_precision,
    bland_altman,
    dice,
    evaluate,
    evaluate_image,
    match_instances,
    write_report,
)
from detcid.serialize import dump_json, load_json


def blob(shape, y0, y1, x0, x1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


class TestMatchInstances:
    def test_perfect_single_match(self):
        m = blob((16, 16), 2, 8, 3, 9)
        result = match_instances([(0.9, m)], [m], 0.5)
        assert result.pairs == [(0, 0, 1.0)]
        assert not result.unmatched_detections and not result.unmatched_truths

    def test_no_detections(self):
        truths = [blob((8, 8), 0, 3, 0, 3), blob((8, 8), 4, 8, 4, 8)]
        result = match_instances([], truths, 0.5)
        assert result.pairs == []
        assert result.unmatched_truths == [0, 1]

    def test_matches_equal_brute_force_oracle(self):
        # oracle: same greedy rule, written with raw loops and pixel sets
        rng = np.random.default_rng(0)
        for _ in range(20):
            dets = []
            for _ in range(5):
                y, x = rng.integers(0, 8, 2)
                dets.append((float(rng.random()), blob((16, 16), y, y + 6, x, x + 6)))
            truths = []
            for _ in range(3):
                y, x = rng.integers(0, 8, 2)
                truths.append(blob((16, 16), y, y + 6, x, x + 6))

            def oracle():
                def overlap(a, b):
                    sa = {(i, j) for i, j in zip(*np.nonzero(a))}
                    sb = {(i, j) for i, j in zip(*np.nonzero(b))}
                    if not sa or not sb:
                        return 0.0
                    return len(sa & sb) / min(len(sa), len(sb))

                order = sorted(range(5), key=lambda i: (-dets[i][0], i))
                taken, pairs = set(), []
                for di in order:
                    best, best_t = 0.0, -1
                    for ti in range(3):
                        if ti in taken:
                            continue
                        v = overlap(dets[di][1], truths[ti])
                        if v >= 0.5 and v > best:
                            best, best_t = v, ti
                    if best_t >= 0:
                        taken.add(best_t)
                        pairs.append((di, best_t))
                return pairs

            got = [(d, t) for d, t, _ in match_instances(dets, truths, 0.5).pairs]
            assert got == oracle()


class TestAveragePrecision:
    def test_perfect_single_detection(self):
        assert average_precision([(0.9, True)], 1) == 1.0

    def test_no_detections(self):
        assert average_precision([], 3) == 0.0

    def test_zero_truths_is_absent(self):
        assert average_precision([(0.5, False)], 0) is None

    def test_hand_computed_pr_curve(self):
        # dets at scores .9 TP, .8 FP, .7 TP over 2 truths:
        # AP = 1 * 0.5 + (2/3) * 0.5
        flags = [(0.9, True), (0.8, False), (0.7, True)]
        assert average_precision(flags, 2) == pytest.approx(1 * 0.5 + (2 / 3) * 0.5, abs=1e-9)

    def test_monotone_in_threshold_via_matching(self):
        rng = np.random.default_rng(1)
        dets, truths = [], []
        for _ in range(6):
            y, x = rng.integers(0, 10, 2)
            dets.append((float(rng.random()), "vegetative", blob((20, 20), y, y + 8, x, x + 8)))
        for _ in range(4):
            y, x = rng.integers(0, 10, 2)
            truths.append(InstanceMask(blob((20, 20), y, y + 8, x, x + 8)))
        stack = MaskStack(truths, ["vegetative"] * 4)
        aps = []
        for thr in (0.3, 0.5, 0.7, 0.9):
            ev = evaluate_image("x", dets, stack, thr)
            aps.append(average_precision(ev.scored_flags["vegetative"], 4))
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


class TestDice:
    def test_identical(self):
        m = blob((10, 10), 1, 5, 2, 8)
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        assert dice(blob((8, 8), 0, 2, 0, 2), blob((8, 8), 5, 8, 5, 8)) == 0.0

    def test_half_overlap_pixel_count(self):
        a = blob((8, 8), 0, 2, 0, 4)  # 8 px
        b = blob((8, 8), 0, 2, 2, 6)  # 8 px, 4 shared
        assert dice(a, b) == pytest.approx(0.5)

    def test_both_empty_is_one(self):
        e = np.zeros((4, 4), dtype=bool)
        assert dice(e, e) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.random((9, 9)) > 0.5
            b = rng.random((9, 9)) > 0.5
            assert dice(a, b) == dice(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            dice(np.zeros((3, 3), bool), np.zeros((4, 3), bool))


class TestBlandAltman:
    def test_identical_series(self):
        r = bland_altman([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (r.bias, r.loa_low, r.loa_high) == (0.0, 0.0, 0.0)
        assert r.r2 == pytest.approx(1.0)

    def test_constant_offset(self):
        r = bland_altman([3.0, 4.0, 5.0], [1.0, 2.0, 3.0])
        assert r.bias == pytest.approx(2.0)
        assert r.loa_low == pytest.approx(2.0)
        assert r.loa_high == pytest.approx(2.0)
        assert r.r2 == pytest.approx(1.0)

    def test_hand_computed_case(self):
        a = [1.0, 2.0, 3.0, 4.0]
        b = [1.0, 3.0, 2.0, 5.0]
        d = np.array(a) - np.array(b)
        sd = float(np.std(d, ddof=1))
        r = bland_altman(a, b)
        assert r.bias == pytest.approx(-0.25)
        assert r.loa_low == pytest.approx(-0.25 - 1.96 * sd)
        assert r.loa_high == pytest.approx(-0.25 + 1.96 * sd)
        expected_r = np.corrcoef(a, b)[0, 1] ** 2
        assert r.r2 == pytest.approx(expected_r)

    def test_limits_symmetric_about_bias(self):
        rng = np.random.default_rng(3)
        a, b = rng.random(10), rng.random(10)
        r = bland_altman(a, b)
        assert (r.loa_high - r.bias) == pytest.approx(r.bias - r.loa_low)

    def test_constant_series_r2_absent(self):
        r = bland_altman([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
        assert r.r2 is None

    def test_too_short_rejected(self):
        with pytest.raises(InvalidConfigError):
            bland_altman([1.0], [2.0])


def make_gt_dataset(tmp_path, n_images=4):
    from detcid.core import GrayImage
    from detcid.synthesis import write_manifest, write_sample

    rng = np.random.default_rng(7)
    root = tmp_path / "gt"
    entries = []
    all_truths = {}
    for i in range(n_images):
        n_cells = 1 + i % 3
        masks, labels = [], []
        for j in range(n_cells):
            y = 2 + 7 * j
            masks.append(InstanceMask(blob((32, 32), y, y + 5, 3 + j, 20 + j)))
            labels.append("vegetative" if (i + j) % 2 == 0 else "spore")
        truth = MaskStack(masks, labels)
        image = GrayImage(rng.random((32, 32)))
        write_sample(root, i, image, truth)
        entries.append({"id": f"{i:06d}", "n_instances": n_cells, "n_skips": 0})
        all_truths[f"{i:06d}"] = truth
    write_manifest(root, {}, 0, entries)
    return root, all_truths


def write_perfect_predictions(tmp_path, truths):
    pred = tmp_path / "pred"
    pred.mkdir(exist_ok=True)
    for iid, stack in truths.items():
        doc = []
        for mask, label in zip(stack.masks, stack.class_labels):
            doc.append({
                "score": 0.95,
                "class": label,
                "box": [0.0, 0.0, 1.0, 1.0],
                "mask": {"size": list(mask.shape), "counts": rle_encode(mask.pixels)},
                "provenance": {"anchor_kind": None, "anchor_scale": None},
            })
        dump_json(doc, pred / f"{iid}.json")
    return pred


class TestEvaluate:
    def test_predictions_equal_truth(self, tmp_path):
        gt_root, truths = make_gt_dataset(tmp_path)
        pred = write_perfect_predictions(tmp_path, truths)
        report = evaluate(pred, gt_root, iou_threshold=0.5)
        assert report.overall["map"] == pytest.approx(1.0)
        assert report.overall["dice"] == pytest.approx(1.0)
        assert report.agreement["counts"]["bias"] == pytest.approx(0.0)
        assert report.agreement["counts"]["r2"] == pytest.approx(1.0)
        assert report.agreement["areas"]["bias"] == pytest.approx(0.0)

    def test_report_schema_table_structure(self, tmp_path):
        gt_root, truths = make_gt_dataset(tmp_path)
        pred = write_perfect_predictions(tmp_path, truths)
        report = evaluate(pred, gt_root)
        doc = report.to_dict()
        for label in ("vegetative", "spore"):
            for key in ("ap", "dice", "n_truth", "n_pred"):
                assert key in doc["per_class"][label]
        assert set(doc["overall"]) == {"map", "dice"}
        assert set(doc["agreement"]) == {"counts", "areas"}
        for section in doc["agreement"].values():
            assert set(section) == {"bias", "loa", "r2"}

    def test_aggregation_matches_per_image_merge(self, tmp_path):
        from detcid.detection import detections_from_json
        from detcid.synthesis import load_sample

        gt_root, truths = make_gt_dataset(tmp_path)
        pred = write_perfect_predictions(tmp_path, truths)
        whole = evaluate(pred, gt_root)
        singles = []
        for iid in sorted(truths):
            dets = detections_from_json(load_json(pred / f"{iid}.json"))
            _, truth, _ = load_sample(gt_root, iid)
            singles.append(evaluate_image(iid, dets, truth, 0.5))
        merged = aggregate(singles)
        assert merged.per_class == whole.per_class
        assert merged.overall == whole.overall
        assert merged.agreement == whole.agreement

    def test_mismatched_ids_raise(self, tmp_path):
        gt_root, _ = make_gt_dataset(tmp_path)
        pred = tmp_path / "wrong"
        pred.mkdir()
        dump_json([], pred / "999999.json")
        with pytest.raises(NoOverlapError):
            evaluate(pred, gt_root)

    def test_empty_pred_dir_scores_zero(self, tmp_path):
        gt_root, _ = make_gt_dataset(tmp_path)
        empty = tmp_path / "nothing"
        empty.mkdir()
        report = evaluate(empty, gt_root)
        assert report.overall["map"] == 0.0
        assert len(report.missing_predictions) == 4

    def test_missing_ids_listed_not_fatal(self, tmp_path):
        gt_root, truths = make_gt_dataset(tmp_path)
        pred = write_perfect_predictions(tmp_path, truths)
        (pred / "000003.json").unlink()
        report = evaluate(pred, gt_root)
        assert report.missing_predictions == ["000003"]
        assert "000003" in report.images  # still scored, as zero detections

    def test_write_report_files(self, tmp_path):
        gt_root, truths = make_gt_dataset(tmp_path)
        pred = write_perfect_predictions(tmp_path, truths)
        report = evaluate(pred, gt_root)
        write_report(report, tmp_path / "r.json", tmp_path / "r.csv")
        doc = load_json(tmp_path / "r.json")
        assert doc["overall"]["map"] == pytest.approx(1.0)
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines[0] == "class,ap,dice,n_truth,n_pred"
        assert len(lines) == 4  # header + 2 classes + overall
