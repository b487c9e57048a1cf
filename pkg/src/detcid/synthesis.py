"""SEM-like image synthesis with exact per-cell ground truth.

The generator removes cells from an annotated source image (diffusion
inpainting), re-synthesizes a full-size background by texture quilting from
a window of that background, then pastes randomly warped cells back in
three scenarios: isolated, touching pairs, and crossing pairs. Every placed
cell yields a binary ground-truth mask and a provenance record of the
random draws, so datasets regenerate byte-identically from a seed.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from detcid import kernels
from detcid.core import (
    AffineTransform,
    GrayImage,
    InstanceMask,
    MaskStack,
    centroid,
    major_axis_angle,
    tight_bbox,
)
from detcid.errors import (
    DegenerateMaskError,
    EmptyMaskError,
    InvalidConfigError,
    NoBackgroundError,
    PlacementFailedError,
)
from detcid.serialize import dump_json, load_json

_QUANT = 65535  # quantization scale for exact integer SSD comparisons
_RESIDUAL_SEED = 0x5EED  # fixed seed: inpainting stays a deterministic function


@dataclass
class AnnotatedImage:
    """A source image together with one binary mask per cell."""

    image: GrayImage
    masks: MaskStack

    def __post_init__(self):
        if len(self.masks) < 1:
            raise InvalidConfigError("annotated image needs at least one cell")
        for m in self.masks:
            if m.shape != self.image.shape:
                raise InvalidConfigError("mask shape differs from image shape")
            if m.is_empty():
                raise EmptyMaskError("annotated image contains an empty mask")

    @property
    def n_cells(self) -> int:
        return len(self.masks)


@dataclass
class SynthesisConfig:
    """All scalars steering one synthesis run.

    ``out_size`` is (rows, cols). The pair ranges are inclusive. Shear for a
    placed cell is ``shear_base + shear_scale * eps`` with eps uniform in
    [0, 1]; per-axis scale is drawn from [1 - shear_scale, 1 + shear_scale].
    """

    out_size: tuple[int, int] = (411, 711)
    range_isolated: tuple[int, int] = (2, 4)
    range_touching: tuple[int, int] = (2, 4)
    range_crossing: tuple[int, int] = (2, 4)
    max_vertical_shift: float = 10.0
    max_horizontal_shift: float = 10.0
    max_angle_jitter_deg: float = 15.0
    shear_base: float = 0.0
    shear_scale: float = 0.1
    quilt_window: int = 64
    quilt_block: int = 32
    quilt_overlap: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        self.out_size = (int(self.out_size[0]), int(self.out_size[1]))
        for name in ("max_vertical_shift", "max_horizontal_shift", "max_angle_jitter_deg"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be >= 0")
        if not (0 <= self.quilt_overlap < self.quilt_block <= self.quilt_window):
            raise InvalidConfigError("need quilt_overlap < quilt_block <= quilt_window")
        for name in ("range_isolated", "range_touching", "range_crossing"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise InvalidConfigError(f"bad {name}: ({lo}, {hi})")
            setattr(self, name, (int(lo), int(hi)))
        if self.rng_seed < 0:
            raise InvalidConfigError("rng_seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["out_size"] = list(self.out_size)
        for name in ("range_isolated", "range_touching", "range_crossing"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown synthesis config keys: {sorted(unknown)}")
        kw = dict(d)
        for name in ("out_size", "range_isolated", "range_touching", "range_crossing"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)


@dataclass
class SyntheticSample:
    """One synthesized image, its ground-truth masks, and the draw log."""

    image: GrayImage
    truth: MaskStack
    provenance: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# background extraction


def _box_blur(arr: np.ndarray, size: int = 5) -> np.ndarray:
    return ndimage.uniform_filter(arr, size=size, mode="reflect")


def _harmonic_fill(img: np.ndarray, hole: np.ndarray, tol: float = 1e-4,
                   max_sweeps: int = 20000) -> np.ndarray:
    """Fill hole pixels by relaxing each to the mean of its neighbors.

    Runs Jacobi sweeps until the largest per-sweep change drops below
    ``tol``, seeding finer levels from a coarse solution so big holes
    converge quickly.
    """
    out = img.astype(np.float64).copy()
    hole = hole.astype(bool)
    if not hole.any():
        return out
    if min(img.shape) > 24 and hole.sum() > 64:
        # coarse level: a pixel is hole only if all children are hole
        h, w = img.shape
        h2, w2 = (h + 1) // 2, (w + 1) // 2
        pad = np.zeros((h2 * 2, w2 * 2), dtype=np.float64)
        pad[:h, :w] = np.where(hole, 0.0, out)
        cnt = np.zeros((h2 * 2, w2 * 2), dtype=np.float64)
        cnt[:h, :w] = (~hole).astype(np.float64)
        num = pad[0::2, 0::2] + pad[0::2, 1::2] + pad[1::2, 0::2] + pad[1::2, 1::2]
        den = cnt[0::2, 0::2] + cnt[0::2, 1::2] + cnt[1::2, 0::2] + cnt[1::2, 1::2]
        coarse_hole = den == 0
        coarse = np.divide(num, den, out=np.zeros_like(num), where=~coarse_hole)
        coarse = _harmonic_fill(coarse, coarse_hole, tol=tol * 4, max_sweeps=max_sweeps)
        up = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)[:h, :w]
        out[hole] = up[hole]
    else:
        background = out[~hole]
        out[hole] = background.mean() if background.size else 0.5
    hole8 = hole.astype(np.uint8)
    for _ in range(max_sweeps):
        out, delta = kernels.jacobi_sweep(out, hole8)
        if delta <= tol:
            break
    return out


def inpaint_background(src: AnnotatedImage) -> GrayImage:
    """Remove all annotated cells, leaving a plausible cell-free background.

    Foreground pixels get a smoothness fill plus high-frequency residuals
    resampled from the surrounding background, so local statistics stay
    close to the neighborhood. Background pixels are returned untouched.
    """
    img = src.image.pixels
    hole = np.zeros(img.shape, dtype=bool)
    for m in src.masks:
        hole |= m.pixels
    if hole.all():
        raise NoBackgroundError("cell masks cover the whole image")

    # work on the hole bounding box with a 1-px rim
    ys, xs = np.nonzero(hole)
    y0, y1 = max(0, ys.min() - 1), min(img.shape[0], ys.max() + 2)
    x0, x1 = max(0, xs.min() - 1), min(img.shape[1], xs.max() + 2)
    region = img[y0:y1, x0:x1]
    region_hole = hole[y0:y1, x0:x1]
    filled = _harmonic_fill(region, region_hole)
    out = img.astype(np.float64).copy()
    out[y0:y1, x0:x1][region_hole] = filled[region_hole]

    # texture restoration: resample high-frequency residuals from the ring,
    # scaled so the filled region's variance matches the ring's
    ring = ndimage.binary_dilation(hole, iterations=8) & ~hole
    if ring.any():
        residual = img - _box_blur(img)
        pool = residual[ring] - residual[ring].mean()
        v_pool = float(pool.var())
        if v_pool > 0:
            v_ring = float(img[ring].var())
            v_fill = float(out[hole].var())
            scale = np.sqrt(max(0.0, v_ring - v_fill) / v_pool)
            rng = np.random.default_rng(_RESIDUAL_SEED)
            draws = pool[rng.integers(0, pool.size, size=int(hole.sum()))]
            out[hole] = out[hole] + min(scale, 4.0) * draws
    return GrayImage(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# texture quilting


def _flush_positions(total: int, block: int, step: int) -> list[int]:
    if total <= block:
        return [0]
    pos = [0]
    while pos[-1] + block < total:
        pos.append(min(pos[-1] + step, total - block))
    return pos


def _quilt(patch: np.ndarray, out_h: int, out_w: int, block: int, overlap: int,
           rng: np.random.Generator) -> tuple[np.ndarray, float, list[dict]]:
    """Efros-Freeman quilting; returns (canvas, total seam cost, placements)."""
    ph, pw = patch.shape
    patch_q = np.floor(patch * _QUANT + 0.5).astype(np.int64)
    canvas = np.zeros((out_h, out_w), dtype=np.float64)
    canvas_q = np.zeros((out_h, out_w), dtype=np.int64)
    filled = np.zeros((out_h, out_w), dtype=bool)
    step = block - overlap
    total_seam = 0.0
    placements: list[dict] = []

    for by in _flush_positions(out_h, block, step):
        for bx in _flush_positions(out_w, block, step):
            bh = min(block, out_h - by)
            bw = min(block, out_w - bx)
            region = (slice(by, by + bh), slice(bx, bx + bw))
            mask = filled[region]
            ssd = kernels.masked_ssd_scan(patch_q[: ph, : pw], canvas_q[region], mask.astype(np.uint8))
            lo = int(ssd.min())
            cands = np.argwhere(ssd <= lo + lo // 10)
            si, sj = map(int, cands[int(rng.integers(len(cands)))])
            new = patch[si : si + bh, sj : sj + bw]
            new_q = patch_q[si : si + bh, sj : sj + bw]

            use_new = np.ones((bh, bw), dtype=bool)
            # leading fully-filled columns/rows form the left and top strips
            col_full = mask.all(axis=0)
            ov_w = int(np.argmin(col_full)) if not col_full.all() else bw
            row_full = mask.all(axis=1)
            ov_h = int(np.argmin(row_full)) if not row_full.all() else bh

            seam_cost = 0.0
            if 0 < ov_w < bw:
                strip_cost = (canvas_q[by : by + bh, bx : bx + ov_w] - new_q[:, :ov_w]) ** 2
                cut = kernels.seam_cut_vertical(strip_cost)
                for r in range(bh):
                    use_new[r, : cut[r]] = False
                    d = canvas[by + r, bx + cut[r]] - new[r, cut[r]]
                    seam_cost += d * d
            if 0 < ov_h < bh:
                strip_cost = (canvas_q[by : by + ov_h, bx : bx + bw] - new_q[:ov_h, :]) ** 2
                cut = kernels.seam_cut_vertical(np.ascontiguousarray(strip_cost.T))
                for c in range(bw):
                    use_new[: cut[c], c] = False
                    d = canvas[by + cut[c], bx + c] - new[cut[c], c]
                    seam_cost += d * d

            sub_c = canvas[region]
            sub_q = canvas_q[region]
            sub_c[use_new] = new[use_new]
            sub_q[use_new] = new_q[use_new]
            filled[region] = True
            total_seam += seam_cost
            placements.append(
                {"out_y": by, "out_x": bx, "src_y": si, "src_x": sj, "seam_cost": seam_cost}
            )
    return canvas, total_seam, placements


def quilt_texture(patch: GrayImage, out_size: tuple[int, int], block: int,
                  overlap: int, rng: np.random.Generator) -> GrayImage:
    """Synthesize an ``out_size`` texture from ``patch`` by block quilting.

    Blocks are picked by minimal SSD over the already-filled overlap and
    joined along minimum-error seams found by dynamic programming.
    """
    if block > min(patch.shape):
        raise InvalidConfigError(f"block {block} exceeds patch {patch.shape}")
    if not (0 <= overlap < block):
        raise InvalidConfigError("need 0 <= overlap < block")
    canvas, _, _ = _quilt(patch.pixels, out_size[0], out_size[1], block, overlap, rng)
    return GrayImage(canvas)


# ---------------------------------------------------------------------------
# cell placement


def _hull_extent(mask: InstanceMask, t: AffineTransform) -> tuple[float, float, float, float]:
    bb = tight_bbox(mask)
    corners = [
        (bb.x0 - 0.5, bb.y0 - 0.5),
        (bb.x1 + 0.5, bb.y0 - 0.5),
        (bb.x0 - 0.5, bb.y1 + 0.5),
        (bb.x1 + 0.5, bb.y1 + 0.5),
    ]
    pts = [t.apply(x, y) for x, y in corners]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return min(xs), max(xs), min(ys), max(ys)


def add_cell(src: AnnotatedImage, cell_index: int, canvas: GrayImage, theta_deg: float,
             x: float, y: float, cfg: SynthesisConfig, rng: np.random.Generator,
             record: dict | None = None) -> tuple[GrayImage, InstanceMask]:
    """Warp one annotated cell onto the canvas.

    The cell is extracted under its mask, recentered, randomly sheared and
    scaled, rotated so its major axis sits at ``theta_deg``, and translated
    so its centroid lands at (x, y), nudged back inside if it would stick
    out. Returns the updated canvas and the placed mask. Raises
    :class:`PlacementFailedError` if the warped mask degenerates even after
    one retry with fresh noise.
    """
    if not 0 <= cell_index < src.n_cells:
        raise InvalidConfigError(f"cell index {cell_index} out of range")
    out_h, out_w = canvas.shape
    if (out_h, out_w) != tuple(cfg.out_size):
        raise InvalidConfigError("canvas size differs from cfg.out_size")
    mask = src.masks.masks[cell_index]
    cell_img = GrayImage(src.image.pixels * mask.pixels)
    cx0, cy0 = centroid(mask)
    center = ((out_w - 1) / 2.0, (out_h - 1) / 2.0)
    # integer recentering keeps the mask bit-exact through this stage
    t_recenter = AffineTransform.translation(
        round(center[0] - cx0), round(center[1] - cy0)
    )

    last_error: Exception | None = None
    for _ in range(2):
        eps_shear, eps_sx, eps_sy = rng.random(3)
        shear = cfg.shear_base + cfg.shear_scale * eps_shear
        sx = 1.0 + cfg.shear_scale * (2.0 * eps_sx - 1.0)
        sy = 1.0 + cfg.shear_scale * (2.0 * eps_sy - 1.0)
        perturb = AffineTransform.shear_x(shear, center) @ AffineTransform.scaling(sx, sy, center)
        t_warp = perturb @ t_recenter
        warped_mask = InstanceMask(
            kernels.warp_nearest(mask.pixels.astype(np.uint8), t_warp.inverse().matrix, out_h, out_w).astype(bool)
        )
        try:
            phi = major_axis_angle(warped_mask)
        except DegenerateMaskError as exc:
            last_error = exc
            continue

        t_rot = AffineTransform.rotation_deg(theta_deg - phi, center) @ t_warp
        tx0, ty0 = t_rot.apply(cx0, cy0)
        t_full = AffineTransform.translation(x - tx0, y - ty0) @ t_rot

        # nudge fully inside the frame when the warped hull sticks out
        hx0, hx1, hy0, hy1 = _hull_extent(mask, t_full)
        dx = max(0.0, -hx0) - max(0.0, hx1 - (out_w - 1))
        dy = max(0.0, -hy0) - max(0.0, hy1 - (out_h - 1))
        dx, dy = float(np.ceil(abs(dx)) * np.sign(dx)), float(np.ceil(abs(dy)) * np.sign(dy))
        if dx or dy:
            t_full = AffineTransform.translation(dx, dy) @ t_full

        inv = t_full.inverse().matrix
        placed_mask = kernels.warp_nearest(mask.pixels.astype(np.uint8), inv, out_h, out_w)
        if not placed_mask.any():
            last_error = PlacementFailedError("warped mask left the frame or vanished")
            continue
        placed_img = kernels.warp_bilinear(cell_img.pixels, inv, out_h, out_w)
        placed = placed_mask.astype(bool)
        composite = canvas.pixels.copy()
        composite[placed] = np.clip(placed_img[placed], 0.0, 1.0)
        if record is not None:
            record.update(
                {
                    "theta_deg": float(theta_deg),
                    "requested_x": float(x),
                    "requested_y": float(y),
                    "corrected_x": float(x + dx),
                    "corrected_y": float(y + dy),
                    "shear": float(shear),
                    "scale_x": float(sx),
                    "scale_y": float(sy),
                }
            )
        return GrayImage(composite), InstanceMask(placed)
    raise PlacementFailedError(f"cell {cell_index}: {last_error}")


# ---------------------------------------------------------------------------
# image-level synthesis


def _draw_count(rng: np.random.Generator, lo: int, hi: int, n_cells: int) -> int:
    # counts are capped by the number of annotated cells in the source image
    hi_eff = min(hi, n_cells)
    lo_eff = min(lo, hi_eff)
    return int(rng.integers(lo_eff, hi_eff + 1))


def _pick_index(rng: np.random.Generator, indices: list[int]) -> int:
    return indices[int(rng.integers(len(indices)))]


def synthesize_image(pool: list[AnnotatedImage], cfg: SynthesisConfig,
                     rng: np.random.Generator) -> SyntheticSample:
    """Run the full single-image synthesis loop.

    Picks a source image, extracts and re-synthesizes its background, draws
    the isolated/touching/crossing counts, and places cells with bounded
    retries (3 per cell slot; failures are recorded as skips).
    """
    if not pool:
        raise InvalidConfigError("empty source pool")
    out_h, out_w = cfg.out_size
    k = int(rng.integers(len(pool)))
    src = pool[k]
    n = src.n_cells

    background = inpaint_background(src)
    bh, bw = background.shape
    w = cfg.quilt_window
    if w > min(bh, bw):
        raise InvalidConfigError(f"quilt window {w} exceeds source image {background.shape}")
    py = int(rng.integers(bh - w + 1))
    px = int(rng.integers(bw - w + 1))
    patch = GrayImage(background.pixels[py : py + w, px : px + w])
    canvas = quilt_texture(patch, cfg.out_size, cfg.quilt_block, cfg.quilt_overlap, rng)

    n_isolated = _draw_count(rng, *cfg.range_isolated, n)
    n_touching = _draw_count(rng, *cfg.range_touching, n)
    n_crossing = _draw_count(rng, *cfg.range_crossing, n)

    labels = src.masks.class_labels
    all_idx = list(range(n))
    veg_idx = [i for i in all_idx if labels[i] == "vegetative"] or all_idx

    masks: list[InstanceMask] = []
    out_labels: list[str] = []
    placements: list[dict] = []
    skips: list[dict] = []
    slot = 0

    def place(kind: str, cell: int, theta: float, x: float, y: float,
              pair: dict | None = None) -> InstanceMask | None:
        nonlocal canvas, slot
        base = {"slot": slot, "kind": kind, "source_cell": cell,
                "class_label": labels[cell], "pair": pair}
        slot += 1
        for attempt in range(3):
            rec: dict = {}
            try:
                canvas, placed = add_cell(src, cell, canvas, theta, x, y, cfg, rng, record=rec)
            except PlacementFailedError as exc:
                if attempt == 2:
                    skips.append({**base, "reason": str(exc), "attempts": attempt + 1})
                    return None
                continue
            placements.append({**base, **rec, "attempts": attempt + 1})
            masks.append(placed)
            out_labels.append(labels[cell])
            return placed
        return None

    def draw_first(indices: list[int]) -> tuple[int, float, float, float]:
        cell = _pick_index(rng, indices)
        bb = tight_bbox(src.masks.masks[cell])
        omega, eta = bb.width, bb.height
        theta = float(rng.uniform(0.0, 180.0))
        x_lo, x_hi = omega / 2.0, out_w - omega / 2.0
        y_lo, y_hi = eta / 2.0, out_h - eta / 2.0
        x1 = float(rng.uniform(x_lo, x_hi)) if x_lo < x_hi else out_w / 2.0
        y1 = float(rng.uniform(y_lo, y_hi)) if y_lo < y_hi else out_h / 2.0
        return cell, theta, x1, y1

    for _ in range(n_isolated):
        cell, theta, x1, y1 = draw_first(all_idx)
        place("isolated", cell, theta, x1, y1)

    for _ in range(n_touching):
        cell, theta, x1, y1 = draw_first(veg_idx)
        first = place("touching_first", cell, theta, x1, y1)
        if first is None:
            skips.append({"slot": slot, "kind": "touching_second",
                          "reason": "first of pair skipped", "attempts": 0})
            slot += 1
            continue
        fx, fy = centroid(first)
        omega = tight_bbox(first).width
        partner = _pick_index(rng, all_idx)
        side = 1 if rng.random() < 0.5 else -1
        x2 = fx + side * float(rng.uniform(omega / 2.0, omega))
        eps_y = float(rng.random())
        sign_y = 1 if rng.random() < 0.5 else -1
        y2 = fy + sign_y * cfg.max_vertical_shift * eps_y
        pair = {"anchor_x": fx, "anchor_y": fy, "omega": omega, "side": side,
                "epsilon": eps_y, "partner_slot": slot - 1}
        place("touching_second", partner, theta, x2, y2, pair=pair)

    for _ in range(n_crossing):
        cell, theta, x1, y1 = draw_first(veg_idx)
        first = place("crossing_first", cell, theta, x1, y1)
        if first is None:
            skips.append({"slot": slot, "kind": "crossing_second",
                          "reason": "first of pair skipped", "attempts": 0})
            slot += 1
            continue
        fx, fy = centroid(first)
        eta = tight_bbox(first).height
        partner = _pick_index(rng, veg_idx)
        side = 1 if rng.random() < 0.5 else -1
        y2 = fy + side * float(rng.uniform(eta / 2.0, eta))
        eps_x = float(rng.random())
        sign_x = 1 if rng.random() < 0.5 else -1
        x2 = fx + sign_x * cfg.max_horizontal_shift * eps_x
        eps_phi = float(rng.random())
        sign_phi = 1 if rng.random() < 0.5 else -1
        phi = theta + 90.0 + sign_phi * cfg.max_angle_jitter_deg * eps_phi
        pair = {"anchor_x": fx, "anchor_y": fy, "eta": eta, "side": side,
                "epsilon": eps_x, "epsilon_phi": eps_phi, "partner_slot": slot - 1}
        place("crossing_second", partner, phi, x2, y2, pair=pair)

    provenance = {
        "source_image": k,
        "patch_origin": [py, px],
        "counts": {"isolated": n_isolated, "touching": n_touching, "crossing": n_crossing},
        "placements": placements,
        "skips": skips,
    }
    truth = MaskStack(masks, out_labels)
    return SyntheticSample(image=canvas, truth=truth, provenance=provenance)


# ---------------------------------------------------------------------------
# dataset-level synthesis and I/O


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-image stream: both values feed the seed hash."""
    return np.random.default_rng([seed, index])


def _image_id(index: int) -> str:
    return f"{index:06d}"


def write_sample(root: str | Path, index: int, image: GrayImage, truth: MaskStack,
                 provenance: dict | None = None) -> dict:
    """Write one sample in the dataset layout and return its annotation record."""
    root = Path(root)
    iid = _image_id(index)
    (root / "masks" / iid).mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    image.save_png(root / "images" / f"{iid}.png")
    prov = provenance or {}
    placements = prov.get("placements", [])
    instances = []
    for j, (mask, label) in enumerate(zip(truth.masks, truth.class_labels)):
        rel = f"masks/{iid}/{j:03d}.png"
        mask.save_png(root / rel)
        instances.append({
            "mask": rel,
            "class_label": label,
            "provenance": placements[j] if j < len(placements) else {},
        })
    record = {
        "image": f"images/{iid}.png",
        "size": [image.height, image.width],
        "instances": instances,
        "counts": prov.get("counts", {}),
        "skips": prov.get("skips", []),
        "source_image": prov.get("source_image"),
        "patch_origin": prov.get("patch_origin"),
    }
    dump_json(record, root / "annotations" / f"{iid}.json")
    return record


def write_manifest(root: str | Path, cfg_echo: dict, seed: int, entries: list[dict]) -> dict:
    skip_log = [
        {"id": e["id"], "n_skips": e["n_skips"]} for e in entries if e.get("n_skips")
    ]
    manifest = {
        "config": cfg_echo,
        "seed": seed,
        "count": len(entries),
        "images": entries,
        "skip_log": skip_log,
    }
    dump_json(manifest, Path(root) / "manifest.json")
    return manifest


def _synthesize_one(args) -> tuple[int, dict]:
    pool, cfg, root, index = args
    sample = synthesize_image(pool, cfg, image_rng(cfg.rng_seed, index))
    record = write_sample(Path(root), index, sample.image, sample.truth, sample.provenance)
    return index, {
        "id": _image_id(index),
        "n_instances": len(record["instances"]),
        "n_skips": len(record["skips"]),
    }


def synthesize_dataset(pool: list[AnnotatedImage], cfg: SynthesisConfig, z: int,
                       out_dir: str | Path, workers: int = 1) -> dict:
    """Generate ``z`` samples under ``out_dir`` and return the manifest.

    Every image draws from its own seed-derived stream, so outputs are
    byte-identical across runs and worker counts.
    """
    if z < 1:
        raise InvalidConfigError("z must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    tasks = [(pool, cfg, str(root), i) for i in range(z)]
    entries: list[dict | None] = [None] * z
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for index, entry in ex.map(_synthesize_one, tasks):
                entries[index] = entry
    else:
        for task in tasks:
            index, entry = _synthesize_one(task)
            entries[index] = entry
    return write_manifest(root, cfg.to_dict(), cfg.rng_seed, entries)


def load_sample(root: str | Path, image_id: str) -> tuple[GrayImage, MaskStack, dict]:
    """Read one sample (image, truth masks, annotation record) back."""
    root = Path(root)
    record = load_json(root / "annotations" / f"{image_id}.json")
    image = GrayImage.load_png(root / record["image"])
    masks = [InstanceMask.load_png(root / inst["mask"]) for inst in record["instances"]]
    labels = [inst["class_label"] for inst in record["instances"]]
    return image, MaskStack(masks, labels), record


def list_dataset(root: str | Path) -> list[str]:
    root = Path(root)
    manifest = load_json(root / "manifest.json")
    return [entry["id"] for entry in manifest["images"]]


def load_pool(root: str | Path) -> list[AnnotatedImage]:
    """Load a dataset-layout directory as a synthesis source pool."""
    pool = []
    for iid in list_dataset(root):
        image, masks, _ = load_sample(root, iid)
        pool.append(AnnotatedImage(image=image, masks=masks))
    return pool
