"""Command-line entry points and experiment orchestration.

One JSON config file carries per-command sections; every output manifest
echoes the section it used, and seeds are always explicit in outputs. Exit
codes are stable: 0 success, 2 config/usage, 3 I/O, 4 numeric divergence,
5 partial failure, 6 empty evaluation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from detcid.errors import DetcidError, DivergenceError, InvalidConfigError
from detcid.serialize import dump_json, load_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_PARTIAL = 5
EXIT_EMPTY_EVAL = 6

_KNOWN_SECTIONS = {"seed", "paths", "synthesis", "arpn", "detection", "head_train",
                   "evaluation"}
_KNOWN_PATHS = {"pool"}
_KNOWN_EVAL = {"iou_threshold"}


class _CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise _CliError(EXIT_CONFIG, f"config not found: {path}")
    except json.JSONDecodeError as exc:
        raise _CliError(
            EXIT_CONFIG, f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        )
    if not isinstance(doc, dict):
        raise _CliError(EXIT_CONFIG, "config root must be a JSON object")
    unknown = set(doc) - _KNOWN_SECTIONS
    if unknown:
        raise _CliError(EXIT_CONFIG, f"unknown config sections: {sorted(unknown)}")
    paths = doc.get("paths", {})
    if set(paths) - _KNOWN_PATHS:
        raise _CliError(EXIT_CONFIG, f"unknown path keys: {sorted(set(paths) - _KNOWN_PATHS)}")
    if set(doc.get("evaluation", {})) - _KNOWN_EVAL:
        raise _CliError(EXIT_CONFIG, "unknown evaluation keys")
    return doc


def _resolve_seed(args_seed, config: dict) -> int:
    """Priority: --seed flag, DETCID_SEED env, config, fresh draw."""
    if args_seed is not None:
        return int(args_seed)
    env = os.environ.get("DETCID_SEED")
    if env is not None:
        return int(env)
    if "seed" in config:
        return int(config["seed"])
    return int(np.random.SeedSequence().entropy % (2 ** 63))


def _resolve_workers(args_workers) -> int:
    if args_workers is not None:
        return max(1, int(args_workers))
    env = os.environ.get("DETCID_WORKERS")
    return max(1, int(env)) if env else 1


def _load_samples(data_root: Path):
    from detcid.synthesis import list_dataset, load_sample

    try:
        ids = list_dataset(data_root)
    except FileNotFoundError:
        raise _CliError(EXIT_CONFIG, f"no manifest.json under {data_root}")
    samples = []
    for iid in ids:
        image, truth, _ = load_sample(data_root, iid)
        samples.append((image, truth))
    return samples


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from detcid.synthesis import SynthesisConfig, load_pool, synthesize_dataset

    config = _load_config(args.config)
    section = dict(config.get("synthesis", {}))
    seed = _resolve_seed(args.seed, {**config, **({"seed": section["rng_seed"]}
                                                  if "rng_seed" in section else {})})
    section["rng_seed"] = seed
    try:
        syn_cfg = SynthesisConfig.from_dict(section)
    except InvalidConfigError as exc:
        raise _CliError(EXIT_CONFIG, str(exc))

    pool_dir = args.pool or config.get("paths", {}).get("pool")
    if not pool_dir:
        raise _CliError(EXIT_CONFIG, "no source pool: pass --pool or set paths.pool")
    try:
        pool = load_pool(pool_dir)
    except FileNotFoundError as exc:
        raise _CliError(EXIT_IO, f"cannot read pool: {exc}")

    count = args.count if args.count is not None else 10
    out = Path(args.out)
    try:
        synthesize_dataset(pool, syn_cfg, count, out, workers=_resolve_workers(args.workers))
    except OSError as exc:
        raise _CliError(EXIT_IO, f"cannot write dataset: {exc}")
    print(out / "manifest.json")
    return EXIT_OK


def cmd_train_arpn(args) -> int:
    import torch

    from detcid.arpn import (
        TrainConfig,
        load_arpn_checkpoint,
        train_arpn,
        write_loss_csv,
    )

    config = _load_config(args.config)
    section = dict(config.get("arpn", {}))
    section.setdefault("seed", _resolve_seed(args.seed, config))
    try:
        cfg = TrainConfig.from_dict(section)
    except InvalidConfigError as exc:
        raise _CliError(EXIT_CONFIG, str(exc))

    samples = _load_samples(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "arpn_checkpoint.json"

    resume_state = resume_extra = None
    if args.resume:
        resume_state, resume_extra = load_arpn_checkpoint(args.resume)
    try:
        state = train_arpn(samples, cfg, resume=resume_state, resume_extra=resume_extra,
                           checkpoint_path=ckpt_path)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        print(f"last good checkpoint: {ckpt_path}", file=sys.stderr)
        return EXIT_DIVERGENCE
    write_loss_csv(out / "arpn_loss.csv", state.curves)
    print(ckpt_path)
    return EXIT_OK


def cmd_train_head(args) -> int:
    from detcid.arpn import load_arpn_checkpoint, write_loss_csv
    from detcid.detection import (
        DetectionConfig,
        HeadTrainConfig,
        load_detector_checkpoint,
        train_head,
    )

    config = _load_config(args.config)
    try:
        det_cfg = DetectionConfig.from_dict(dict(config.get("detection", {})))
        head_section = dict(config.get("head_train", {}))
        head_section.setdefault("seed", _resolve_seed(args.seed, config))
        train_cfg = HeadTrainConfig.from_dict(head_section)
    except InvalidConfigError as exc:
        raise _CliError(EXIT_CONFIG, str(exc))

    if not Path(args.arpn).exists():
        raise _CliError(EXIT_CONFIG, f"missing arpn checkpoint: {args.arpn}")
    arpn_state, _ = load_arpn_checkpoint(args.arpn)
    samples = _load_samples(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "detector_checkpoint.json"

    resume_state = resume_extra = None
    if args.resume:
        resume_state, resume_extra = load_detector_checkpoint(args.resume)
        det_cfg = resume_state.config
    try:
        state = train_head(samples, arpn_state.segmenter, det_cfg, train_cfg,
                           resume=resume_state, resume_extra=resume_extra,
                           checkpoint_path=ckpt_path)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        print(f"last good checkpoint: {ckpt_path}", file=sys.stderr)
        return EXIT_DIVERGENCE
    write_loss_csv(out / "detector_loss.csv", state.curves,
                   header=("step", "loss", "n_matched"))
    print(ckpt_path)
    return EXIT_OK


def cmd_detect(args) -> int:
    from detcid.arpn import load_arpn_checkpoint
    from detcid.core import GrayImage
    from detcid.detection import detect, detections_to_json, load_detector_checkpoint

    for ckpt in (args.arpn, args.head):
        if not Path(ckpt).exists():
            raise _CliError(EXIT_CONFIG, f"missing checkpoint: {ckpt}")
    arpn_state, _ = load_arpn_checkpoint(args.arpn)
    det_state, _ = load_detector_checkpoint(args.head)
    cfg = det_state.config

    if args.image:
        images = [Path(args.image)]
    else:
        root = Path(args.dir)
        if (root / "images").is_dir():
            root = root / "images"
        images = sorted(root.glob("*.png"))
        if not images:
            raise _CliError(EXIT_IO, f"no PNG images under {root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    failures = []
    results = []
    for path in images:
        try:
            image = GrayImage.load_png(path)
            dets = detect(image, arpn_state.segmenter, det_state.backbone,
                          det_state.head, cfg)
            doc = detections_to_json(dets, image.shape)
            dump_json(doc, out / f"{path.stem}.json")
            results.append({"image": path.name, "n_detections": len(dets)})
        except Exception as exc:  # keep processing the rest
            failures.append({"image": path.name, "error": str(exc)})
    dump_json(
        {"config": cfg.to_dict(), "results": results, "failures": failures},
        out / "detect_manifest.json",
    )
    if failures:
        for f in failures:
            print(f"failed: {f['image']}: {f['error']}", file=sys.stderr)
        print(f"{len(failures)} of {len(images)} images failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(args) -> int:
    from detcid.evaluation import NoOverlapError, evaluate, write_report

    config = _load_config(args.config)
    iou_threshold = float(config.get("evaluation", {}).get("iou_threshold", 0.5))
    try:
        report = evaluate(args.pred, args.gt, iou_threshold=iou_threshold)
    except NoOverlapError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_EMPTY_EVAL
    except FileNotFoundError as exc:
        raise _CliError(EXIT_IO, str(exc))
    report_path = Path(args.report)
    write_report(report, report_path, report_path.with_suffix(".csv"),
                 extra={"config": {"iou_threshold": iou_threshold}})
    overall = report.overall
    fmt = lambda v: "absent" if v is None else f"{v:.3f}"
    print(f"overall mAP {fmt(overall['map'])} dice {fmt(overall['dice'])}")
    return EXIT_OK


def cmd_make_pool(args) -> int:
    from detcid.toydata import make_toy_pool, write_pool

    seed = _resolve_seed(args.seed, {})
    pool = make_toy_pool(args.images, rng_seed=seed, shape=(args.size, args.size),
                         n_rods=args.rods, n_spores=args.spores)
    try:
        write_pool(pool, args.out, seed=seed)
    except OSError as exc:
        raise _CliError(EXIT_IO, f"cannot write pool: {exc}")
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detcid",
                                     description="Cell detection pipeline tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a training dataset")
    p.add_argument("--config", help="JSON config with a 'synthesis' section")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pool", help="source pool directory (dataset layout)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-arpn", help="train the adversarial proposal network")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_arpn)

    p = sub.add_parser("train-head", help="train backbone and detection head")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--arpn", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("detect", help="run detection over images")
    p.add_argument("--arpn", required=True)
    p.add_argument("--head", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--image")
    group.add_argument("--dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-pool", help="generate a procedural toy source pool")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=3)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--rods", type=int, default=5)
    p.add_argument("--spores", type=int, default=2)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_pool)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except _CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except InvalidConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    except DetcidError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DIVERGENCE if isinstance(exc, DivergenceError) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
