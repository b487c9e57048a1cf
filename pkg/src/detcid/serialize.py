"""Deterministic JSON, checkpoint, and atomic file helpers.

All JSON written by the pipeline goes through :func:`dump_json` so repeated
runs with the same seed produce byte-identical artifacts. Checkpoints are
JSON documents with base64-encoded little-endian tensors.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ": "), indent=1)


def dump_json(obj, path: str | Path) -> None:
    atomic_write_bytes(path, (canonical_json(obj) + "\n").encode("utf-8"))


def load_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    le = np.dtype(arr.dtype).newbyteorder("<")
    return {
        "dtype": le.str,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype(le, copy=False).tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    dtype = np.dtype(d["dtype"])
    arr = np.frombuffer(raw, dtype=dtype).reshape(d["shape"])
    return arr.astype(dtype.newbyteorder("="))


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, kind: str, config: dict, step: int,
                    params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write a versioned checkpoint (config echo, step, tensors, extras)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "step": step,
        "params": {k: encode_array(v) for k, v in params.items()},
        "extra": extra or {},
    }
    dump_json(doc, path)


def load_checkpoint(path: str | Path) -> dict:
    doc = load_json(path)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    doc["params"] = {k: decode_array(v) for k, v in doc["params"].items()}
    return doc
