"""Instance-level detection and segmentation scoring.

Per-class average precision on a mask-overlap matching measure, Dice over
matched pairs, and Bland-Altman agreement statistics for per-image counts
and per-instance mask areas. Dataset evaluation aggregates raw per-image
match records, so partial results merge deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from detcid.core import CLASS_LABELS, InstanceMask, MaskStack
from detcid.detection import detections_from_json, modified_iou_masks
from detcid.errors import DetcidError, InvalidConfigError, ShapeMismatchError
from detcid.serialize import atomic_write_bytes, dump_json, load_json
from detcid.synthesis import list_dataset, load_sample


class NoOverlapError(DetcidError):
    """Prediction and ground-truth directories share no image ids."""


@dataclass
class MatchResult:
    """Greedy matching output: index pairs plus leftovers on both sides."""

    pairs: list[tuple[int, int, float]]
    unmatched_detections: list[int]
    unmatched_truths: list[int]


def match_instances(detections: list[tuple[float, np.ndarray]],
                    truths: list[np.ndarray], iou_threshold: float,
                    iou_fn=modified_iou_masks) -> MatchResult:
    """Match detections (score, mask) to truth masks, best score first.

    Each detection claims the highest-overlap unmatched truth at or above
    the threshold; each side is used at most once.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][0], i))
    taken: set[int] = set()
    pairs = []
    unmatched_dets = []
    for di in order:
        _, mask = detections[di]
        best_iou, best_t = 0.0, -1
        for ti, tmask in enumerate(truths):
            if ti in taken:
                continue
            iou = iou_fn(mask, tmask)
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_t = iou, ti
        if best_t >= 0:
            taken.add(best_t)
            pairs.append((di, best_t, best_iou))
        else:
            unmatched_dets.append(di)
    unmatched_truths = [ti for ti in range(len(truths)) if ti not in taken]
    return MatchResult(pairs, unmatched_dets, unmatched_truths)


def average_precision(scored_flags: list[tuple[float, bool]], n_truth: int) -> float | None:
    """Area under the precision-recall curve with all-point interpolation.

    ``scored_flags`` holds (score, is_true_positive) per detection across
    the dataset. Returns None when there are no ground-truth instances.
    """
    if n_truth == 0:
        return None
    if not scored_flags:
        return 0.0
    order = sorted(range(len(scored_flags)), key=lambda i: (-scored_flags[i][0], i))
    tp = np.cumsum([1.0 if scored_flags[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if scored_flags[i][1] else 1.0 for i in order])
    recall = tp / n_truth
    precision = tp / np.maximum(tp + fp, 1e-12)
    # monotone precision envelope, then sum rectangle areas between recalls
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def dice(pred: InstanceMask | np.ndarray, gt: InstanceMask | np.ndarray) -> float:
    """2|A.B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    a = pred.pixels if isinstance(pred, InstanceMask) else np.asarray(pred, dtype=bool)
    b = gt.pixels if isinstance(gt, InstanceMask) else np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


@dataclass
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    r2: float | None

    def to_dict(self) -> dict:
        return {"bias": self.bias, "loa": [self.loa_low, self.loa_high], "r2": self.r2}


def bland_altman(series_a, series_b) -> BlandAltman:
    """Agreement between two measurement series.

    Differences are a - b; limits of agreement are bias +- 1.96 sample
    standard deviations; r2 is the squared Pearson correlation, reported as
    None when either series is constant.
    """
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError("series must be 1-D and equally long")
    if a.size < 2:
        raise InvalidConfigError("need at least 2 observations")
    d = a - b
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    if a.std() == 0.0 or b.std() == 0.0:
        r2 = None
    else:
        r = float(np.corrcoef(a, b)[0, 1])
        r2 = r * r
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, r2)


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class ImageEval:
    """Raw per-image match evidence, mergeable across images."""

    image_id: str
    scored_flags: dict[str, list[tuple[float, bool]]]
    n_truth: dict[str, int]
    pair_dice: dict[str, list[float]]
    pred_areas: list[float]
    truth_areas: list[float]
    n_pred_total: int
    n_truth_total: int


def evaluate_image(image_id: str, dets: list[tuple[float, str, np.ndarray]],
                   truth: MaskStack, iou_threshold: float) -> ImageEval:
    """Match one image's detections against its truth, per class."""
    scored: dict[str, list[tuple[float, bool]]] = {}
    n_truth: dict[str, int] = {}
    pair_dice: dict[str, list[float]] = {}
    pred_areas: list[float] = []
    truth_areas: list[float] = []
    for label in CLASS_LABELS:
        class_dets = [(s, m) for s, lbl, m in dets if lbl == label]
        class_truths = [m.pixels for m, lbl in zip(truth.masks, truth.class_labels)
                        if lbl == label]
        n_truth[label] = len(class_truths)
        result = match_instances(class_dets, class_truths, iou_threshold)
        flags = [False] * len(class_dets)
        pair_dice[label] = []
        for di, ti, _ in result.pairs:
            flags[di] = True
            pair_dice[label].append(dice(class_dets[di][1], class_truths[ti]))
            pred_areas.append(float(class_dets[di][1].sum()))
            truth_areas.append(float(class_truths[ti].sum()))
        scored[label] = [(s, f) for (s, _), f in zip(class_dets, flags)]
    return ImageEval(
        image_id=image_id,
        scored_flags=scored,
        n_truth=n_truth,
        pair_dice=pair_dice,
        pred_areas=pred_areas,
        truth_areas=truth_areas,
        n_pred_total=len(dets),
        n_truth_total=len(truth),
    )


@dataclass
class EvalReport:
    per_class: dict[str, dict]
    overall: dict
    agreement: dict
    images: list[str] = field(default_factory=list)
    missing_predictions: list[str] = field(default_factory=list)
    missing_truths: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "overall": self.overall,
            "agreement": self.agreement,
            "images": self.images,
            "missing_predictions": self.missing_predictions,
            "missing_truths": self.missing_truths,
        }


def aggregate(evals: list[ImageEval]) -> EvalReport:
    """Combine per-image match evidence into the final report."""
    per_class = {}
    aps = []
    all_dice = []
    for label in CLASS_LABELS:
        flags = [sf for ev in evals for sf in ev.scored_flags.get(label, [])]
        n_truth = sum(ev.n_truth.get(label, 0) for ev in evals)
        ap = average_precision(flags, n_truth)
        dices = [d for ev in evals for d in ev.pair_dice.get(label, [])]
        all_dice.extend(dices)
        per_class[label] = {
            "ap": ap,
            "dice": float(np.mean(dices)) if dices else None,
            "n_truth": n_truth,
            "n_pred": len(flags),
        }
        if ap is not None:
            aps.append(ap)
    mean_dice = float(np.mean(all_dice)) if all_dice else None
    overall = {
        "map": float(np.mean(aps)) if aps else None,
        "dice": mean_dice,
    }
    pred_counts = [float(ev.n_pred_total) for ev in evals]
    truth_counts = [float(ev.n_truth_total) for ev in evals]
    agreement = {"counts": None, "areas": None}
    if len(evals) >= 2:
        agreement["counts"] = bland_altman(pred_counts, truth_counts).to_dict()
    pred_areas = [a for ev in evals for a in ev.pred_areas]
    truth_areas = [a for ev in evals for a in ev.truth_areas]
    if len(pred_areas) >= 2:
        agreement["areas"] = bland_altman(pred_areas, truth_areas).to_dict()
    return EvalReport(per_class=per_class, overall=overall, agreement=agreement,
                      images=[ev.image_id for ev in evals])


def evaluate(pred_dir, gt_dir, iou_threshold: float = 0.5) -> EvalReport:
    """Score a directory of detection JSONs against a dataset directory.

    Every ground-truth image is scored; one without a prediction file
    counts as zero detections and is listed under missing_predictions.
    Raises :class:`NoOverlapError` when prediction files exist but none
    matches a ground-truth id (wrong directory pairing).
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_ids = set(list_dataset(gt_dir))
    pred_ids = {p.stem for p in pred_dir.glob("*.json")}
    pred_ids.discard("detect_manifest")
    if pred_ids and not (gt_ids & pred_ids):
        raise NoOverlapError(f"no shared image ids between {pred_dir} and {gt_dir}")
    evals = []
    for iid in sorted(gt_ids):
        if iid in pred_ids:
            dets = detections_from_json(load_json(pred_dir / f"{iid}.json"))
        else:
            dets = []
        _, truth, _ = load_sample(gt_dir, iid)
        evals.append(evaluate_image(iid, dets, truth, iou_threshold))
    report = aggregate(evals)
    report.missing_predictions = sorted(gt_ids - pred_ids)
    report.missing_truths = sorted(pred_ids - gt_ids)
    return report


def write_report(report: EvalReport, json_path, csv_path=None, extra: dict | None = None) -> None:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    dump_json(doc, json_path)
    if csv_path is not None:
        lines = ["class,ap,dice,n_truth,n_pred"]
        fmt = lambda v: "" if v is None else repr(v)
        for label, row in report.per_class.items():
            lines.append(
                f"{label},{fmt(row['ap'])},{fmt(row['dice'])},{row['n_truth']},{row['n_pred']}"
            )
        lines.append(
            f"overall,{fmt(report.overall['map'])},{fmt(report.overall['dice'])},,"
        )
        atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode("utf-8"))
