"""Procedural toy sources: rod-shaped cells and round spores on SEM-ish texture.

Used by the test suite and the quickstart to bootstrap a synthesis pool
without real microscopy data. Rods have aspect ratio >= 3 so orientation
measurements are well-defined.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from detcid.core import GrayImage, InstanceMask, MaskStack
from detcid.synthesis import AnnotatedImage, write_manifest, write_sample


def _background(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    gx, gy = rng.uniform(-1, 1, 2)
    ramp = (gx * xs / max(w - 1, 1) + gy * ys / max(h - 1, 1)) * 0.12
    noise = ndimage.uniform_filter(rng.normal(0.0, 0.35, shape), size=3)
    return np.clip(0.42 + ramp + noise * 0.16, 0.05, 0.95)


def _ellipse_mask(shape: tuple[int, int], cx: float, cy: float, a: float, b: float,
                  angle_deg: float) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    rad = np.deg2rad(angle_deg)
    dx, dy = xs - cx, ys - cy
    u = dx * np.cos(rad) + dy * np.sin(rad)
    v = -dx * np.sin(rad) + dy * np.cos(rad)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def make_toy_image(shape: tuple[int, int], n_rods: int, n_spores: int,
                   rng: np.random.Generator, rod_half_length: tuple[float, float] = (10.0, 14.0),
                   rod_half_width: tuple[float, float] = (2.0, 2.8)) -> AnnotatedImage:
    """One annotated image with non-overlapping rods and spores."""
    h, w = shape
    img = _background(shape, rng)
    occupied = np.zeros(shape, dtype=bool)
    masks: list[InstanceMask] = []
    labels: list[str] = []

    def try_place(kind: str) -> None:
        for _ in range(60):
            if kind == "vegetative":
                a = float(rng.uniform(*rod_half_length))
                b = float(rng.uniform(*rod_half_width))
            else:
                a = b = float(rng.uniform(2.5, 4.0))
            angle = float(rng.uniform(0.0, 180.0))
            margin = a + 2
            if 2 * margin >= min(h, w):
                continue
            cx = float(rng.uniform(margin, w - 1 - margin))
            cy = float(rng.uniform(margin, h - 1 - margin))
            body = _ellipse_mask(shape, cx, cy, a, b, angle)
            if body.sum() < 12 or (body & ndimage.binary_dilation(occupied, iterations=2)).any():
                continue
            inner = _ellipse_mask(shape, cx, cy, max(a - 1.6, 1.0), max(b - 1.6, 0.8), angle)
            wall = body & ~inner
            tone = float(rng.uniform(0.68, 0.80))
            img[inner] = tone + rng.normal(0.0, 0.02, int(inner.sum()))
            img[wall] = tone - 0.25
            occupied[body] = True
            masks.append(InstanceMask(body))
            labels.append(kind)
            return

    for _ in range(n_rods):
        try_place("vegetative")
    for _ in range(n_spores):
        try_place("spore")
    if not masks:
        raise RuntimeError("could not place any toy cell; image too small?")
    return AnnotatedImage(image=GrayImage(np.clip(img, 0.0, 1.0)), masks=MaskStack(masks, labels))


def make_toy_pool(n_images: int, rng_seed: int, shape: tuple[int, int] = (96, 96),
                  n_rods: int = 5, n_spores: int = 2) -> list[AnnotatedImage]:
    pool = []
    for i in range(n_images):
        rng = np.random.default_rng([rng_seed, 7_000_000 + i])
        pool.append(make_toy_image(shape, n_rods, n_spores, rng))
    return pool


def write_pool(pool: list[AnnotatedImage], out_dir: str | Path, seed: int = 0) -> None:
    """Persist a pool in the dataset layout so it can serve as synth input."""
    entries = []
    for i, item in enumerate(pool):
        record = write_sample(out_dir, i, item.image, item.masks)
        entries.append({"id": f"{i:06d}", "n_instances": len(record["instances"]), "n_skips": 0})
    write_manifest(out_dir, {"kind": "toy_pool"}, seed, entries)
