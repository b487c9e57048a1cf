"""Anchor proposals, feature extraction, detection head, and mask NMS.

Label maps from the proposal network are pooled over anchor-shaped windows
to seed box proposals; a small residual pyramid computes shared features; a
head predicts score, box offsets, and an instance mask per aligned ROI.
Duplicates are removed by greedy NMS on a mask-overlap measure
(intersection over the smaller mask area), which suppresses elongated
duplicates that plain box IoU misses.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from detcid.arpn import Segmenter, _as_float_tensor, segmenter_forward
from detcid.core import CLASS_LABELS, BoundingBox, GrayImage, InstanceMask, MaskStack, tight_bbox
from detcid.errors import (
    DivergenceError,
    InvalidBoxError,
    InvalidConfigError,
    ShapeMismatchError,
)
from detcid.serialize import decode_array, encode_array, load_checkpoint, save_checkpoint

ANCHOR_KINDS = ("horizontal", "vertical", "square")
LOG_SCALE_CLAMP = 2.0  # bound on predicted log size changes during decoding
LABEL_MAP_CHANNELS = 3  # ROI patches combine backbone features with the label map


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor template: orientation kind plus box area in square pixels."""

    kind: str
    scale: float

    def __post_init__(self):
        if self.kind not in ANCHOR_KINDS:
            raise InvalidConfigError(f"unknown anchor kind {self.kind!r}")
        if self.scale <= 0:
            raise InvalidConfigError("anchor scale must be positive")

    def box_dims(self) -> tuple[float, float]:
        """(width, height); horizontal is 2:1, vertical 1:2, square 1:1."""
        side = math.sqrt(self.scale)
        if self.kind == "horizontal":
            return side * math.sqrt(2.0), side / math.sqrt(2.0)
        if self.kind == "vertical":
            return side / math.sqrt(2.0), side * math.sqrt(2.0)
        return side, side


def default_anchors(scales=(32.0 ** 2, 64.0 ** 2, 128.0 ** 2)) -> list[AnchorSpec]:
    return [AnchorSpec(kind, float(s)) for s in scales for kind in ANCHOR_KINDS]


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    anchor: AnchorSpec
    pooled_score: float


@dataclass
class Detection:
    """One detected instance; ``box`` is absolute once decoded."""

    score: float
    box_reg: np.ndarray
    mask: np.ndarray  # binary (g, g) grid inside the box
    class_label: str
    box: BoundingBox | None = None
    anchor: AnchorSpec | None = None


@dataclass
class DetectionConfig:
    """Model and inference settings for the detection stage."""

    anchor_scales: tuple = (32.0 ** 2, 64.0 ** 2, 128.0 ** 2)
    anchor_stride: int = 8
    tau_anchor: float | None = None  # None: derive from the training set
    tau_nms: float = 0.5
    score_threshold: float = 0.5
    roi_grid: int = 14
    base_width: int = 16
    head_fc_width: int = 128
    class_count: int = 2
    jitter_min_cell_fraction: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.tau_nms <= 1.0:
            raise InvalidConfigError("tau_nms must be in (0, 1]")
        if self.anchor_stride < 1 or self.roi_grid < 2:
            raise InvalidConfigError("bad anchor_stride or roi_grid")
        if self.class_count < 1 or self.class_count > len(CLASS_LABELS):
            raise InvalidConfigError(f"class_count must be in [1, {len(CLASS_LABELS)}]")
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)

    def anchors(self) -> list[AnchorSpec]:
        return default_anchors(self.anchor_scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_scales"] = list(self.anchor_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown detection config keys: {sorted(unknown)}")
        kw = dict(d)
        if "anchor_scales" in kw:
            kw["anchor_scales"] = tuple(kw["anchor_scales"])
        return cls(**kw)


@dataclass
class HeadTrainConfig:
    """Optimization settings for the detection stage trainer."""

    learning_rate: float = 1e-3
    steps: int = 300
    batch_images: int = 2
    negatives_per_positive: int = 3
    seed: int = 0
    checkpoint_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown head train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# proposals


def _cellness(label_map: np.ndarray) -> np.ndarray:
    arr = np.asarray(label_map, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeMismatchError(f"expected a (3, H, W) label map, got {arr.shape}")
    return arr[1] + arr[2]


def _integral(img: np.ndarray) -> np.ndarray:
    out = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=out[1:, 1:])
    return out


def _window_mean(integral: np.ndarray, shape: tuple[int, int], cx: float, cy: float,
                 w: float, h: float) -> float:
    hh, ww = shape
    x0 = max(0, int(round(cx - w / 2.0)))
    x1 = min(ww, int(round(cx + w / 2.0)))
    y0 = max(0, int(round(cy - h / 2.0)))
    y1 = min(hh, int(round(cy + h / 2.0)))
    if x1 <= x0 or y1 <= y0:
        return 0.0
    total = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    return float(total / ((x1 - x0) * (y1 - y0)))


def propose_anchors(label_map: np.ndarray, anchors: list[AnchorSpec], tau_anchor: float,
                    stride: int = 8) -> list[Proposal]:
    """Average body+wall probability over anchor windows at stride-aligned
    centers; emit a proposal wherever the mean exceeds ``tau_anchor``.
    Windows are clipped at the frame; the proposal box keeps full anchor size.
    """
    cellness = _cellness(label_map)
    h, w = cellness.shape
    integral = _integral(cellness)
    proposals = []
    for anchor in anchors:
        aw, ah = anchor.box_dims()
        for cy in range(0, h, stride):
            for cx in range(0, w, stride):
                score = _window_mean(integral, (h, w), cx, cy, aw, ah)
                if score > tau_anchor:
                    proposals.append(
                        Proposal(BoundingBox(float(cx), float(cy), aw, ah), anchor, score)
                    )
    return proposals


def jitter_proposals(proposals: list[Proposal], label_map: np.ndarray,
                     min_cell_fraction: float = 0.05) -> list[Proposal]:
    """Expand each proposal with +-5% width/height variants, keeping only
    candidates whose box holds at least ``min_cell_fraction`` mean cell mass."""
    if not proposals:
        return []
    cellness = _cellness(label_map)
    integral = _integral(cellness)
    shape = cellness.shape
    out = []
    factors = (0.95, 1.0, 1.05)
    for prop in proposals:
        for fw in factors:
            for fh in factors:
                w = prop.box.width * fw
                h = prop.box.height * fh
                score = _window_mean(integral, shape, prop.box.cx, prop.box.cy, w, h)
                if score >= min_cell_fraction:
                    out.append(
                        Proposal(
                            BoundingBox(prop.box.cx, prop.box.cy, w, h),
                            prop.anchor,
                            score,
                        )
                    )
    return out


def derive_tau_anchor(truths: list[MaskStack], anchor_scales) -> float:
    """Half the ratio of the smallest cell area to the smallest anchor area,
    clamped to [0.05, 0.5]."""
    smallest = min(
        (m.area for stack in truths for m in stack.masks if not m.is_empty()),
        default=0,
    )
    smallest_anchor = min(anchor_scales)
    tau = 0.5 * smallest / smallest_anchor if smallest_anchor > 0 else 0.5
    return float(min(0.5, max(0.05, tau)))


# ---------------------------------------------------------------------------
# backbone


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.short = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return F.relu(h + self.short(x))


class Backbone(nn.Module):
    """Small residual pyramid with stride-4/8/16 feature grids.

    Lateral 1x1 projections give every level the same channel count so one
    head serves ROIs from any level.
    """

    strides = (4, 8, 16)

    def __init__(self, base_width: int = 16):
        super().__init__()
        b = base_width
        self.stem1 = nn.Conv2d(1, b, 3, stride=2, padding=1)
        self.stem2 = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.block8 = _ResBlock(2 * b, 4 * b, stride=2)
        self.block16 = _ResBlock(4 * b, 8 * b, stride=2)
        self.out_channels = 4 * b
        self.lat4 = nn.Conv2d(2 * b, self.out_channels, 1)
        self.lat8 = nn.Conv2d(4 * b, self.out_channels, 1)
        self.lat16 = nn.Conv2d(8 * b, self.out_channels, 1)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        if x.shape[-1] < 32 or x.shape[-2] < 32:
            raise ShapeMismatchError(f"image {tuple(x.shape[-2:])} smaller than 32 px")
        c2 = F.relu(self.stem2(F.relu(self.stem1(x))))
        c3 = self.block8(c2)
        c4 = self.block16(c3)
        return {4: self.lat4(c2), 8: self.lat8(c3), 16: self.lat16(c4)}


def assign_level(box: BoundingBox) -> int:
    side = math.sqrt(box.area)
    if side < 48:
        return 4
    if side < 96:
        return 8
    return 16


# ---------------------------------------------------------------------------
# ROI alignment


def roi_align(features: torch.Tensor, box: BoundingBox, out_grid: int,
              stride: int = 1) -> torch.Tensor:
    """Bilinear sampling of ``features`` (C, H, W) on a ``out_grid`` square.

    One sample point per output cell, taken at the cell center in image
    coordinates, with no rounding anywhere. Feature pixel (i, j) sits at
    image position (j*stride + (stride-1)/2, i*stride + (stride-1)/2).
    Samples outside the grid read as zero. Fully differentiable.
    """
    if box.width <= 0 or box.height <= 0:
        raise InvalidBoxError("degenerate box")
    c, fh, fw = features.shape
    g = out_grid
    device = features.device
    dtype = features.dtype
    js = torch.arange(g, device=device, dtype=dtype)
    px = box.x0 + (js + 0.5) * (box.width / g)
    py = box.y0 + (js + 0.5) * (box.height / g)
    half = (stride - 1) / 2.0
    fx = (px - half) / stride
    fy = (py - half) / stride
    gx = fx.view(1, g).expand(g, g)
    gy = fy.view(g, 1).expand(g, g)

    x0 = torch.floor(gx)
    y0 = torch.floor(gy)
    wx = gx - x0
    wy = gy - y0
    vals = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = (x0 + dx).long()
            yi = (y0 + dy).long()
            valid = (xi >= 0) & (xi < fw) & (yi >= 0) & (yi < fh)
            xi_c = xi.clamp(0, fw - 1)
            yi_c = yi.clamp(0, fh - 1)
            v = features[:, yi_c.reshape(-1), xi_c.reshape(-1)].view(c, g, g)
            vals.append(v * valid.to(dtype))
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    return vals[0] * w00 + vals[1] * w01 + vals[2] * w10 + vals[3] * w11


# ---------------------------------------------------------------------------
# head


class DetectionHead(nn.Module):
    """Two-conv mask branch plus a fully connected score/box branch."""

    def __init__(self, in_channels: int, grid: int, fc_width: int = 128, class_count: int = 2):
        super().__init__()
        self.grid = grid
        self.class_count = class_count
        self.mask_conv1 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.mask_conv2 = nn.Conv2d(in_channels, 1, 1)
        self.fc1 = nn.Linear(in_channels * grid * grid, fc_width)
        self.fc_score = nn.Linear(fc_width, 1)
        self.fc_class = nn.Linear(fc_width, class_count)
        self.fc_box = nn.Linear(fc_width, 4)

    def forward(self, patch: torch.Tensor):
        """patch: (B, C, g, g) -> (score logit, class logits, box reg, mask logits)."""
        if patch.shape[-1] != self.grid or patch.shape[-2] != self.grid:
            raise ShapeMismatchError(f"expected {self.grid}x{self.grid} ROI patches")
        m = self.mask_conv2(F.relu(self.mask_conv1(patch)))
        h = F.relu(self.fc1(patch.flatten(start_dim=-3)))
        return (
            self.fc_score(h).squeeze(-1),
            self.fc_class(h),
            self.fc_box(h),
            m.squeeze(-3),
        )


def head_forward(head: DetectionHead, roi_patch: torch.Tensor,
                 class_labels=CLASS_LABELS) -> Detection:
    """Run the head on one ROI patch and binarize the mask at 0.5."""
    with torch.no_grad():
        score_logit, class_logits, box_reg, mask_logits = head(roi_patch.unsqueeze(0))
    score = float(torch.sigmoid(score_logit)[0].item())
    mask = (torch.sigmoid(mask_logits)[0] >= 0.5).numpy()
    cls = int(class_logits[0].argmax().item()) if head.class_count > 1 else 0
    return Detection(
        score=score,
        box_reg=box_reg[0].double().numpy(),
        mask=mask.astype(bool),
        class_label=class_labels[cls],
    )


def encode_box(proposal: BoundingBox, gt: BoundingBox) -> np.ndarray:
    return np.array(
        [
            (gt.cx - proposal.cx) / proposal.width,
            (gt.cy - proposal.cy) / proposal.height,
            math.log(gt.width / proposal.width),
            math.log(gt.height / proposal.height),
        ]
    )


def decode_box(proposal: BoundingBox, reg: np.ndarray) -> BoundingBox:
    dx, dy, dw, dh = (float(v) for v in reg)
    dw = min(max(dw, -LOG_SCALE_CLAMP), LOG_SCALE_CLAMP)
    dh = min(max(dh, -LOG_SCALE_CLAMP), LOG_SCALE_CLAMP)
    return BoundingBox(
        cx=proposal.cx + dx * proposal.width,
        cy=proposal.cy + dy * proposal.height,
        width=proposal.width * math.exp(dw),
        height=proposal.height * math.exp(dh),
    )


# ---------------------------------------------------------------------------
# loss


@dataclass
class MatchedTruth:
    """Regression and mask targets for a proposal matched to an instance."""

    box_reg: np.ndarray
    mask: np.ndarray  # binary (g, g), on the proposal's window
    class_index: int = 0
    gt_box: BoundingBox | None = None
    gt_index: int = -1


def _smooth_l1(x: torch.Tensor) -> torch.Tensor:
    absx = x.abs()
    return torch.where(absx < 1.0, 0.5 * x * x, absx - 0.5)


def detection_loss(score, box_reg, mask_probs, matched: MatchedTruth | None) -> torch.Tensor:
    """Score cross-entropy, match-gated smooth-L1 box term, and mask BCE.

    ``score`` and ``mask_probs`` are probabilities in [0, 1]; the box and
    mask terms vanish for unmatched proposals.
    """
    p = _as_float_tensor(score)
    reg = torch.as_tensor(box_reg, dtype=p.dtype)
    mask_p = torch.as_tensor(mask_probs, dtype=p.dtype)
    pstar = 0.0 if matched is None else 1.0
    eps = 1e-12
    cls_term = -(
        pstar * torch.log(torch.clamp(p, min=eps))
        + (1.0 - pstar) * torch.log(torch.clamp(1.0 - p, min=eps))
    )
    if matched is None:
        return cls_term
    target_reg = torch.as_tensor(matched.box_reg, dtype=p.dtype)
    if mask_p.shape != tuple(np.shape(matched.mask)):
        raise ShapeMismatchError(
            f"mask grid {tuple(mask_p.shape)} vs target {np.shape(matched.mask)}"
        )
    reg_term = _smooth_l1(reg - target_reg).sum()
    gt_mask = torch.as_tensor(np.asarray(matched.mask, dtype=np.float64), dtype=p.dtype)
    mask_clamped = torch.clamp(mask_p, min=eps, max=1.0 - eps)
    mask_term = -(
        gt_mask * torch.log(mask_clamped) + (1.0 - gt_mask) * torch.log(1.0 - mask_clamped)
    ).mean()
    return cls_term + reg_term + mask_term


# ---------------------------------------------------------------------------
# mask pasting, modified IoU, NMS


def paste_mask(mask_grid: np.ndarray, box: BoundingBox, img_size: tuple[int, int]) -> np.ndarray:
    """Resample a box-local binary grid into the full frame (bool array).

    The grid is interpreted through the same geometry as ROI alignment:
    cell (i, j) is centered at box.x0 + (j + 0.5) * w / g. Pixels whose
    interpolated value reaches 0.5 turn on.
    """
    h, w = img_size
    out = np.zeros((h, w), dtype=bool)
    g_h, g_w = mask_grid.shape
    x_lo = max(0, int(math.floor(box.x0 + 0.5)))
    x_hi = min(w - 1, int(math.ceil(box.x1 - 0.5)))
    y_lo = max(0, int(math.floor(box.y0 + 0.5)))
    y_hi = min(h - 1, int(math.ceil(box.y1 - 0.5)))
    if x_hi < x_lo or y_hi < y_lo:
        return out
    xs = np.arange(x_lo, x_hi + 1)
    ys = np.arange(y_lo, y_hi + 1)
    jx = (xs - box.x0) * (g_w / box.width) - 0.5
    iy = (ys - box.y0) * (g_h / box.height) - 0.5
    jx = np.clip(jx, 0.0, g_w - 1.0)
    iy = np.clip(iy, 0.0, g_h - 1.0)
    j0 = np.floor(jx).astype(int)
    i0 = np.floor(iy).astype(int)
    fx = jx - j0
    fy = iy - i0
    j1 = np.minimum(j0 + 1, g_w - 1)
    i1 = np.minimum(i0 + 1, g_h - 1)
    grid = mask_grid.astype(np.float64)
    top = grid[np.ix_(i0, j0)] * (1 - fx) + grid[np.ix_(i0, j1)] * fx
    bot = grid[np.ix_(i1, j0)] * (1 - fx) + grid[np.ix_(i1, j1)] * fx
    vals = top * (1 - fy)[:, None] + bot * fy[:, None]
    out[np.ix_(ys, xs)] = vals >= 0.5
    return out


def detection_full_mask(det: Detection, img_size: tuple[int, int]) -> np.ndarray:
    if det.box is None:
        raise InvalidBoxError("detection has no decoded box")
    return paste_mask(det.mask, det.box, img_size)


def modified_iou_masks(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over the smaller mask area; 0 if either mask is empty."""
    area_a = int(a.sum())
    area_b = int(b.sum())
    if area_a == 0 or area_b == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return inter / min(area_a, area_b)


def modified_iou(a: Detection, b: Detection, img_size: tuple[int, int]) -> float:
    return modified_iou_masks(detection_full_mask(a, img_size),
                              detection_full_mask(b, img_size))


def modified_iou_boxes(a: BoundingBox, b: BoundingBox) -> float:
    """Box-rectangle variant of the overlap measure, used for matching."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    return (ix * iy) / min(a.area, b.area)


def _nms_sort_key(det: Detection, area: int) -> tuple:
    box = det.box
    return (-det.score, -area, box.y0, box.x0)


def mask_nms(dets: list[Detection], tau_nms: float, img_size: tuple[int, int]) -> list[Detection]:
    """Greedy suppression on the modified IoU, per class.

    Order: score descending, then larger pasted area, then top-left
    coordinate, making the outcome independent of the input ordering.
    """
    if not 0.0 < tau_nms <= 1.0:
        raise InvalidConfigError("tau_nms must be in (0, 1]")
    full = [detection_full_mask(d, img_size) for d in dets]
    order = sorted(range(len(dets)), key=lambda i: _nms_sort_key(dets[i], int(full[i].sum())))
    kept: list[int] = []
    for i in order:
        suppressed = False
        for j in kept:
            if dets[j].class_label != dets[i].class_label:
                continue
            if modified_iou_masks(full[i], full[j]) >= tau_nms:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [dets[i] for i in kept]


# ---------------------------------------------------------------------------
# full pipeline


def _pad_to_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="reflect")
    return img, (h, w)


def label_map_for_image(segmenter: Segmenter, image: GrayImage) -> np.ndarray:
    """Label map at the image's own size (pads internally to a multiple of 8)."""
    padded, (h, w) = _pad_to_multiple(image.pixels, 8)
    label_map = segmenter_forward(segmenter, GrayImage(padded))
    return label_map[:, :h, :w]


def roi_patch(pyramid: dict[int, torch.Tensor], label_map_t: torch.Tensor,
              box: BoundingBox, grid: int) -> torch.Tensor:
    """ROI input for the head: backbone features at the box's pyramid level
    concatenated with the full-resolution label map, both aligned to the box."""
    level = assign_level(box)
    feats = roi_align(pyramid[level][0], box, grid, stride=level)
    maps = roi_align(label_map_t, box, grid, stride=1)
    return torch.cat([feats, maps], dim=0)


def detect(image: GrayImage, segmenter: Segmenter, backbone: Backbone,
           head: DetectionHead, cfg: DetectionConfig) -> list[Detection]:
    """Full pipeline: label map, anchor proposals, jitter, shared features,
    per-ROI head, score filter, and mask NMS. Deterministic given params.

    The head runs twice per surviving proposal: score and box offsets come
    from the proposal-aligned window, then the mask is re-predicted on a
    window aligned to the decoded box so it pastes where it was predicted.
    """
    if cfg.tau_anchor is None:
        raise InvalidConfigError("tau_anchor unresolved; train the head first or set it")
    label_map = label_map_for_image(segmenter, image)
    proposals = propose_anchors(label_map, cfg.anchors(), cfg.tau_anchor, cfg.anchor_stride)
    proposals = jitter_proposals(proposals, label_map, cfg.jitter_min_cell_fraction)
    if not proposals:
        return []
    with torch.no_grad():
        x = torch.from_numpy(image.pixels.copy()).to(torch.float32)
        pyramid = backbone(x.unsqueeze(0).unsqueeze(0))
        label_map_t = torch.from_numpy(label_map).to(torch.float32)
        patches = torch.stack(
            [roi_patch(pyramid, label_map_t, p.box, cfg.roi_grid) for p in proposals]
        )
        score_logits, class_logits, regs, _ = head(patches)
        scores = torch.sigmoid(score_logits)

        survivors = []
        for i, prop in enumerate(proposals):
            score = float(scores[i].item())
            if score < cfg.score_threshold:
                continue
            reg = regs[i].double().numpy()
            box = decode_box(prop.box, reg)
            if not box.intersects_frame(image.shape):
                continue
            cls = int(class_logits[i].argmax().item()) if head.class_count > 1 else 0
            survivors.append(
                Detection(score=score, box_reg=reg, mask=np.zeros((1, 1), bool),
                          class_label=CLASS_LABELS[cls], box=box, anchor=prop.anchor)
            )
        if not survivors:
            return []
        # second pass: masks predicted on windows aligned to the decoded boxes
        mask_patches = torch.stack(
            [roi_patch(pyramid, label_map_t, d.box, cfg.roi_grid) for d in survivors]
        )
        _, _, _, mask_logits = head(mask_patches)
        masks = (torch.sigmoid(mask_logits) >= 0.5).numpy()
        detections = []
        for det, mask in zip(survivors, masks):
            det.mask = mask.astype(bool)
            if det.mask.any():
                detections.append(det)
    kept = mask_nms(detections, cfg.tau_nms, image.shape)
    kept.sort(key=lambda d: -d.score)
    return kept


# ---------------------------------------------------------------------------
# training


def _mask_target(gt_mask: np.ndarray, box: BoundingBox, grid: int) -> np.ndarray:
    """Ground-truth mask resampled on the proposal's ROI grid."""
    g = grid
    ys = box.y0 + (np.arange(g) + 0.5) * (box.height / g)
    xs = box.x0 + (np.arange(g) + 0.5) * (box.width / g)
    yi = np.clip(np.round(ys).astype(int), 0, gt_mask.shape[0] - 1)
    xi = np.clip(np.round(xs).astype(int), 0, gt_mask.shape[1] - 1)
    inside_y = (ys >= -0.5) & (ys <= gt_mask.shape[0] - 0.5)
    inside_x = (xs >= -0.5) & (xs <= gt_mask.shape[1] - 0.5)
    target = gt_mask[np.ix_(yi, xi)] & inside_y[:, None] & inside_x[None, :]
    return target.astype(bool)


def assign_training_targets(proposals: list[Proposal], truth: MaskStack, grid: int,
                            pos_threshold: float = 0.5, neg_threshold: float = 0.3,
                            ) -> tuple[list[MatchedTruth | None], list[bool]]:
    """Label proposals for training by their best box overlap with the truth.

    Proposals at or above ``pos_threshold`` become positives carrying the
    best instance's regression and mask targets (the mask target also
    remembers that instance's tight box for window-aligned mask training).
    Overlaps inside [neg_threshold, pos_threshold) are ambiguous and are
    excluded from the score loss; the rest are negatives.
    """
    gt_boxes = [tight_bbox(m) for m in truth.masks]
    targets: list[MatchedTruth | None] = [None] * len(proposals)
    ambiguous = [False] * len(proposals)
    for pi, prop in enumerate(proposals):
        best_iou, best_g = 0.0, -1
        for gi, gbox in enumerate(gt_boxes):
            iou = modified_iou_boxes(prop.box, gbox)
            if iou > best_iou:
                best_iou, best_g = iou, gi
        if best_g < 0:
            continue
        if best_iou >= pos_threshold:
            label = truth.class_labels[best_g]
            targets[pi] = MatchedTruth(
                box_reg=encode_box(prop.box, gt_boxes[best_g]),
                mask=_mask_target(truth.masks[best_g].pixels, prop.box, grid),
                class_index=CLASS_LABELS.index(label),
                gt_box=gt_boxes[best_g],
                gt_index=best_g,
            )
        elif best_iou >= neg_threshold:
            ambiguous[pi] = True
    return targets, ambiguous


@dataclass
class DetectorState:
    backbone: Backbone
    head: DetectionHead
    config: DetectionConfig
    step: int = 0
    curves: list = field(default_factory=list)


def train_head(samples: list[tuple[GrayImage, MaskStack]], segmenter: Segmenter,
               cfg: DetectionConfig, train_cfg: HeadTrainConfig,
               resume: DetectorState | None = None, resume_extra: dict | None = None,
               checkpoint_path=None) -> DetectorState:
    """Train backbone and head jointly on proposals from the frozen segmenter.

    Proposals and targets are precomputed per image; each step draws a few
    images, matched positives plus subsampled negatives flow through ROI
    alignment and the head, and Adam minimizes the mean detection loss
    (plus a class cross-entropy when more than one class is configured).
    """
    from detcid.arpn import _load_optimizer_state, _optimizer_state  # shared helpers

    if not samples:
        raise InvalidConfigError("empty training set")
    if cfg.tau_anchor is None:
        cfg.tau_anchor = derive_tau_anchor([t for _, t in samples], cfg.anchor_scales)

    per_image = []
    for image, truth in samples:
        label_map = label_map_for_image(segmenter, image)
        props = propose_anchors(label_map, cfg.anchors(), cfg.tau_anchor, cfg.anchor_stride)
        props = jitter_proposals(props, label_map, cfg.jitter_min_cell_fraction)
        targets, ambiguous = assign_training_targets(props, truth, cfg.roi_grid)
        pos = [i for i, t in enumerate(targets) if t is not None]
        neg = [i for i, t in enumerate(targets) if t is None and not ambiguous[i]]
        # window-aligned mask training pairs: one per instance, aligned to
        # the tight box, matching what the mask branch sees at inference
        gt_windows = []
        for gi, (mask, label) in enumerate(zip(truth.masks, truth.class_labels)):
            gbox = tight_bbox(mask)
            gt_windows.append((gbox, _mask_target(mask.pixels, gbox, cfg.roi_grid)))
        label_map_t = torch.from_numpy(label_map).to(torch.float32)
        per_image.append((image, label_map_t, props, targets, pos, neg, gt_windows))

    if resume is None:
        torch.manual_seed(train_cfg.seed)
        backbone = Backbone(cfg.base_width)
        head = DetectionHead(backbone.out_channels + LABEL_MAP_CHANNELS, cfg.roi_grid,
                             cfg.head_fc_width, cfg.class_count)
        state = DetectorState(backbone, head, cfg, step=0)
    else:
        state = resume
        backbone, head = state.backbone, state.head

    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    if resume is not None and resume_extra:
        if "optimizer" in resume_extra:
            _load_optimizer_state(opt, resume_extra["optimizer"])
        if "rng_state" in resume_extra:
            torch.set_rng_state(torch.from_numpy(decode_array(resume_extra["rng_state"])))

    target_step = state.step + train_cfg.steps
    while state.step < target_step:
        idx = torch.randint(len(per_image), (min(train_cfg.batch_images, len(per_image)),))
        losses = []
        n_pos_total = 0
        opt.zero_grad()
        for i in idx.tolist():
            image, label_map_t, props, targets, pos, neg, gt_windows = per_image[i]
            if not props:
                continue
            cap = max(4, train_cfg.negatives_per_positive * max(1, len(pos)))
            take = list(pos)
            if len(take) > 16:
                perm = torch.randperm(len(take))[:16]
                take = [take[j] for j in perm.tolist()]
            if neg:
                perm = torch.randperm(len(neg))[: min(len(neg), cap)]
                take += [neg[j] for j in perm.tolist()]
            if not take:
                continue
            x = torch.from_numpy(image.pixels.copy()).to(torch.float32)
            pyramid = backbone(x.unsqueeze(0).unsqueeze(0))
            boxes = [props[pi].box for pi in take] + [gb for gb, _ in gt_windows]
            patches = torch.stack(
                [roi_patch(pyramid, label_map_t, b, cfg.roi_grid) for b in boxes]
            )
            score_logits, class_logits, box_regs, mask_logits = head(patches)
            for row, pi in enumerate(take):
                target = targets[pi]
                loss = detection_loss(
                    torch.sigmoid(score_logits[row]),
                    box_regs[row],
                    torch.sigmoid(mask_logits[row]),
                    target,
                )
                if target is not None and cfg.class_count > 1:
                    cls_t = torch.tensor([target.class_index])
                    loss = loss + F.cross_entropy(class_logits[row : row + 1], cls_t)
                losses.append(loss)
                n_pos_total += int(target is not None)
            # mask branch also trains on instance-aligned windows, the
            # geometry it sees when re-run on decoded boxes at inference
            for row, (_, gmask) in enumerate(gt_windows, start=len(take)):
                probs = torch.clamp(torch.sigmoid(mask_logits[row]), 1e-12, 1 - 1e-12)
                gt_t = torch.as_tensor(gmask.astype(np.float64), dtype=probs.dtype)
                losses.append(
                    -(gt_t * torch.log(probs) + (1 - gt_t) * torch.log(1 - probs)).mean()
                )
        if not losses:
            state.step += 1
            continue
        total = torch.stack(losses).mean()
        total.backward()
        torch.nn.utils.clip_grad_norm_(params, 5.0)
        opt.step()
        state.step += 1
        val = float(total.item())
        state.curves.append((state.step, val, n_pos_total))
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite detection loss at step {state.step}")
        if checkpoint_path and train_cfg.checkpoint_every and state.step % train_cfg.checkpoint_every == 0:
            save_detector_checkpoint(checkpoint_path, state, opt, train_cfg)

    if checkpoint_path:
        save_detector_checkpoint(checkpoint_path, state, opt, train_cfg)
    return state


def save_detector_checkpoint(path, state: DetectorState, optimizer=None,
                             train_cfg: HeadTrainConfig | None = None) -> None:
    from detcid.arpn import _optimizer_state, _params_to_numpy

    params = {}
    params.update(_params_to_numpy(state.backbone, "backbone"))
    params.update(_params_to_numpy(state.head, "head"))
    extra = {
        "rng_state": encode_array(torch.get_rng_state().numpy()),
        "train_config": train_cfg.to_dict() if train_cfg else {},
    }
    if optimizer is not None:
        extra["optimizer"] = _optimizer_state(optimizer)
    save_checkpoint(path, "detector", state.config.to_dict(), state.step, params, extra)


def load_detector_checkpoint(path) -> tuple[DetectorState, dict]:
    from detcid.arpn import _load_params

    doc = load_checkpoint(path)
    if doc["kind"] != "detector":
        raise InvalidConfigError(f"not a detector checkpoint: kind={doc['kind']!r}")
    cfg = DetectionConfig.from_dict(doc["config"])
    backbone = Backbone(cfg.base_width)
    head = DetectionHead(backbone.out_channels + LABEL_MAP_CHANNELS, cfg.roi_grid,
                         cfg.head_fc_width, cfg.class_count)
    _load_params(backbone, doc["params"], "backbone")
    _load_params(head, doc["params"], "head")
    state = DetectorState(backbone, head, cfg, step=doc["step"])
    return state, doc["extra"]


# ---------------------------------------------------------------------------
# wire format


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating background/foreground, starting
    with background (possibly zero)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.sum(counts))
    if total != shape[0] * shape[1]:
        raise ShapeMismatchError(f"run lengths sum to {total}, expected {shape[0] * shape[1]}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    fg = False
    for run in counts:
        if fg:
            flat[pos : pos + run] = True
        pos += run
        fg = not fg
    return flat.reshape(shape)


def detections_to_json(dets: list[Detection], img_size: tuple[int, int]) -> list[dict]:
    out = []
    for det in dets:
        full = detection_full_mask(det, img_size)
        out.append(
            {
                "score": float(det.score),
                "class": det.class_label,
                "box": [det.box.cx, det.box.cy, det.box.width, det.box.height],
                "mask": {"size": [img_size[0], img_size[1]], "counts": rle_encode(full)},
                "provenance": {
                    "anchor_kind": det.anchor.kind if det.anchor else None,
                    "anchor_scale": det.anchor.scale if det.anchor else None,
                },
            }
        )
    return out


def detections_from_json(doc: list[dict]) -> list[tuple[float, str, np.ndarray]]:
    """Load (score, class, full-frame mask) triples from the wire format."""
    out = []
    for item in doc:
        shape = tuple(item["mask"]["size"])
        mask = rle_decode(item["mask"]["counts"], shape)
        out.append((float(item["score"]), str(item["class"]), mask))
    return out
