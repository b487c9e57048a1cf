"""Raster, geometry, and mask primitives shared by the whole pipeline.

Coordinate convention everywhere: x = column, y = row, origin at the
top-left pixel center. Angles are measured from the +x axis toward +y
(row-down), in degrees, folded into [0, 180).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from detcid import kernels
from detcid.errors import (
    DegenerateMaskError,
    EmptyMaskError,
    InvalidTransformError,
    ShapeMismatchError,
)

_DET_EPS = 1e-9


def _save_png_atomic(data: np.ndarray, path: str | Path) -> None:
    import io

    from detcid.serialize import atomic_write_bytes

    buf = io.BytesIO()
    Image.fromarray(data, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError(f"expected a nonempty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def save_png(self, path: str | Path) -> None:
        """Write as 8-bit grayscale PNG, intensity i stored as round(255*i)."""
        data = np.floor(self.pixels * 255.0 + 0.5).astype(np.uint8)
        _save_png_atomic(data, path)

    @classmethod
    def load_png(cls, path: str | Path) -> "GrayImage":
        with Image.open(path) as im:
            data = np.asarray(im.convert("L"), dtype=np.float64)
        return cls(data / 255.0)


@dataclass(frozen=True)
class InstanceMask:
    """Binary per-cell mask on the same grid as its image."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError(f"expected a nonempty 2-D grid, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            vals = np.unique(arr)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError("mask values must be 0 or 1")
        arr = arr.astype(bool)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    def is_empty(self) -> bool:
        return not self.pixels.any()

    def save_png(self, path: str | Path) -> None:
        data = np.where(self.pixels, 255, 0).astype(np.uint8)
        _save_png_atomic(data, path)

    @classmethod
    def load_png(cls, path: str | Path) -> "InstanceMask":
        with Image.open(path) as im:
            data = np.asarray(im.convert("L"))
        return cls(data >= 128)


#: Instance categories used throughout the pipeline.
CLASS_LABELS = ("vegetative", "spore")


@dataclass
class MaskStack:
    """Ordered per-cell masks plus their class labels."""

    masks: list[InstanceMask]
    class_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_labels:
            self.class_labels = ["vegetative"] * len(self.masks)
        if len(self.class_labels) != len(self.masks):
            raise ShapeMismatchError("one class label per mask required")
        for label in self.class_labels:
            if label not in CLASS_LABELS:
                raise ValueError(f"unknown class label {label!r}")
        shapes = {m.shape for m in self.masks}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"masks disagree on shape: {shapes}")

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)


@dataclass(frozen=True)
class AffineTransform:
    """3x3 affine matrix with last row (0, 0, 1), acting on (x, y, 1)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidTransformError(f"expected a 3x3 matrix, got {m.shape}")
        if not np.allclose(m[2], (0.0, 0.0, 1.0)):
            raise InvalidTransformError("last row must be (0, 0, 1)")
        if abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) <= _DET_EPS:
            raise InvalidTransformError("transform is not invertible")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    @classmethod
    def rotation_deg(cls, angle: float, center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        """Rotation from +x toward +y by ``angle`` degrees about ``center``."""
        rad = np.deg2rad(angle)
        c, s = np.cos(rad), np.sin(rad)
        rot = cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))
        cx, cy = center
        return cls.translation(cx, cy) @ rot @ cls.translation(-cx, -cy)

    @classmethod
    def scaling(cls, sx: float, sy: float, center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        m = np.diag([sx, sy, 1.0])
        cx, cy = center
        return cls.translation(cx, cy) @ cls(m) @ cls.translation(-cx, -cy)

    @classmethod
    def shear_x(cls, sigma: float, center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        """Horizontal shear: x' = x + sigma * y."""
        m = np.eye(3)
        m[0, 1] = sigma
        cx, cy = center
        return cls.translation(cx, cy) @ cls(m) @ cls.translation(-cx, -cy)

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return AffineTransform(self.matrix @ other.matrix)

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def apply(self, x: float, y: float) -> tuple[float, float]:
        v = self.matrix @ np.array([x, y, 1.0])
        return float(v[0]), float(v[1])


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box given by center (x, y), width, and height in pixels."""

    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            from detcid.errors import InvalidBoxError

            raise InvalidBoxError(f"box size must be positive, got {self.width}x{self.height}")

    @property
    def x0(self) -> float:
        return self.cx - self.width / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.width / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.height / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.height / 2.0

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersects_frame(self, shape: tuple[int, int]) -> bool:
        h, w = shape
        return self.x1 > -0.5 and self.y1 > -0.5 and self.x0 < w - 0.5 and self.y0 < h - 0.5


def warp_affine(img, transform: AffineTransform, out_size: tuple[int, int]):
    """Resample ``img`` under ``transform`` (source -> output coordinates).

    Uses inverse mapping: bilinear for :class:`GrayImage`, nearest-neighbor
    for :class:`InstanceMask`. Pixels mapping outside the source become 0.
    ``out_size`` is (height, width).
    """
    inv = transform.inverse().matrix
    out_h, out_w = out_size
    if isinstance(img, GrayImage):
        out = kernels.warp_bilinear(img.pixels, inv, out_h, out_w)
        return GrayImage(np.clip(out, 0.0, 1.0))
    if isinstance(img, InstanceMask):
        out = kernels.warp_nearest(img.pixels.astype(np.uint8), inv, out_h, out_w)
        return InstanceMask(out.astype(bool))
    raise TypeError(f"cannot warp {type(img).__name__}")


def centroid(mask: InstanceMask) -> tuple[float, float]:
    """Arithmetic mean (x, y) of the foreground pixel coordinates."""
    ys, xs = np.nonzero(mask.pixels)
    if xs.size == 0:
        raise EmptyMaskError("centroid of an empty mask")
    return float(xs.mean()), float(ys.mean())


def major_axis_angle(mask: InstanceMask) -> float:
    """Orientation of the foreground's principal axis, degrees in [0, 180).

    Computed from the eigenvector of the coordinate covariance belonging to
    the larger eigenvalue. Isotropic masks (equal eigenvalues) return 0 by
    convention.
    """
    ys, xs = np.nonzero(mask.pixels)
    if xs.size < 2:
        raise DegenerateMaskError("major axis needs at least 2 foreground pixels")
    x = xs - xs.mean()
    y = ys - ys.mean()
    cxx = float(np.dot(x, x)) / x.size
    cyy = float(np.dot(y, y)) / y.size
    cxy = float(np.dot(x, y)) / x.size
    # eigen-decomposition of [[cxx, cxy], [cxy, cyy]] by hand
    diff = cxx - cyy
    disc = np.hypot(diff, 2.0 * cxy)
    if disc <= 1e-9:
        return 0.0
    # eigenvector for the larger eigenvalue lam = (cxx+cyy+disc)/2
    lam = (cxx + cyy + disc) / 2.0
    if abs(cxy) > 1e-15:
        vx, vy = lam - cyy, cxy
    elif cxx >= cyy:
        vx, vy = 1.0, 0.0
    else:
        vx, vy = 0.0, 1.0
    angle = np.rad2deg(np.arctan2(vy, vx)) % 180.0
    if angle == 180.0:
        angle = 0.0
    return float(angle)


def angular_difference(a: float, b: float) -> float:
    """Distance between two axis orientations, in degrees within [0, 90]."""
    d = abs(a - b) % 180.0
    return min(d, 180.0 - d)


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    """Intersection over union of two masks; 0 when both are empty."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a.pixels, b.pixels).sum())
    union = int(np.logical_or(a.pixels, b.pixels).sum())
    if union == 0:
        return 0.0
    return inter / union


def tight_bbox(mask: InstanceMask) -> BoundingBox:
    """Minimal axis-aligned box covering all foreground pixels."""
    ys, xs = np.nonzero(mask.pixels)
    if xs.size == 0:
        raise EmptyMaskError("bounding box of an empty mask")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return BoundingBox(
        cx=(x0 + x1) / 2.0,
        cy=(y0 + y1) / 2.0,
        width=float(x1 - x0 + 1),
        height=float(y1 - y0 + 1),
    )
