"""Shared data model and exact geometric primitives.

Conventions used throughout the package:

* Boxes are corner pairs ``(x1, y1, x2, y2)`` in continuous pixel units,
  origin at the top-left, x rightward, y downward, with ``x1 < x2`` and
  ``y1 < y2``.
* Pixel ``(row i, col j)`` of a raster is centred at continuous coordinates
  ``(x=j, y=i)``.
* Homographies map reference-image points onto the target frame and are
  stored Frobenius-normalized with ``h[2][2] >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegeneratePoint, EmptyIntersection, SingularHomography

# Condition-number cap above which a homography is considered unusable.
CONDITION_CAP = 1e8

# The fourteen anomaly categories of the drone-patrol vocabulary.
DEFAULT_ANOMALY_LABELS: tuple[str, ...] = (
    "plastic bottle",
    "empty can",
    "tool",
    "garbage bag",
    "traffic cone",
    "glove",
    "helmet",
    "bird nest",
    "umbrella",
    "towel",
    "protective tape",
    "person",
    "open door",
    "water leakage",
)

# Anomalies defined by an object's state rather than its presence.
DEFAULT_STATE_DRIVEN: tuple[str, ...] = ("open door", "water leakage")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle with strictly positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box must satisfy x1 < x2 and y1 < y2, got {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0 when the overlap has no area."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def geo_mean_size(b: BBox) -> float:
    """Geometric mean of width and height, i.e. the square root of the area."""
    return math.sqrt(b.area)


@dataclass(frozen=True)
class LabeledBox:
    """A box plus an anomaly label (vocabulary entry or free prediction text)."""

    bbox: BBox
    label: str

    def __post_init__(self) -> None:
        trimmed = self.label.strip()
        if not trimmed:
            raise ValueError("label must be non-empty after trimming")
        object.__setattr__(self, "label", trimmed)


@dataclass(frozen=True)
class AnomalyVocabulary:
    """Ordered anomaly label set plus the subset treated as state anomalies."""

    labels: tuple[str, ...]
    state_driven: frozenset[str]

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValueError("vocabulary must contain at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("vocabulary labels must be unique")
        if any(lbl != lbl.strip() or not lbl.strip() for lbl in self.labels):
            raise ValueError("vocabulary labels must be non-empty and trimmed")
        if not self.state_driven <= set(self.labels):
            raise ValueError("state_driven must be a subset of labels")

    @classmethod
    def default(cls) -> "AnomalyVocabulary":
        return cls(labels=DEFAULT_ANOMALY_LABELS,
                   state_driven=frozenset(DEFAULT_STATE_DRIVEN))

    def __contains__(self, label: str) -> bool:
        return label in self.labels


@dataclass(frozen=True)
class Telemetry:
    """Capture-time position: latitude/longitude in degrees, altitude in m."""

    latitude: float
    longitude: float
    altitude: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")
        if not math.isfinite(self.altitude):
            raise ValueError(f"altitude must be finite: {self.altitude}")


@dataclass(frozen=True)
class RasterImage:
    """Immutable 8-bit raster, shape (height, width, channels), 1 or 3 channels."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, np.newaxis]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixel array, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {px.dtype}")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def load(cls, path: str | Path) -> "RasterImage":
        with Image.open(path) as im:
            if im.mode in ("L", "I;16"):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return cls(arr)

    def save(self, path: str | Path) -> None:
        arr = self.pixels[:, :, 0] if self.channels == 1 else self.pixels
        Image.fromarray(arr).save(path, format="PNG")

    def to_gray(self) -> np.ndarray:
        """Float64 luma plane (ITU-R BT.601 weights for RGB inputs)."""
        px = self.pixels.astype(np.float64)
        if self.channels == 1:
            return px[:, :, 0]
        return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, Frobenius-normalized, sign fixed at h[2][2] >= 0."""

    h: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "h", _normalize_matrix(np.asarray(self.h, dtype=np.float64)))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def from_flat(cls, values) -> "Homography":
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (9,):
            raise ValueError(f"expected 9 values row-major, got shape {arr.shape}")
        return cls(arr.reshape(3, 3))

    def as_flat(self) -> list[float]:
        return [float(v) for v in self.h.reshape(-1)]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def to_h33(self) -> np.ndarray:
        """Matrix rescaled so h[2][2] == 1; only valid away from h33 ~ 0."""
        if abs(self.h[2, 2]) <= 1e-9:
            raise SingularHomography("h[2][2] too small for h33 = 1 form")
        return self.h / self.h[2, 2]

    def apply(self, p: tuple[float, float]) -> tuple[float, float]:
        return apply_homography(self, p)

    def apply_many(self, pts: np.ndarray) -> np.ndarray:
        """Projective action on an (n, 2) array of points."""
        pts = np.asarray(pts, dtype=np.float64)
        ph = np.column_stack([pts, np.ones(len(pts))])
        q = ph @ self.h.T
        w = q[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise DegeneratePoint("a point mapped to the plane at infinity")
        return q[:, :2] / w[:, np.newaxis]


def _normalize_matrix(m: np.ndarray) -> np.ndarray:
    """Frobenius-normalize, fix sign, and reject degenerate matrices."""
    if m.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("homography entries must be finite")
    norm = float(np.linalg.norm(m))
    if norm == 0.0:
        raise SingularHomography("zero matrix")
    # Skip the division when already unit-norm so normalization is exactly
    # idempotent (renormalizing must not perturb last-ulp bits).
    if abs(norm - 1.0) > 1e-12:
        m = m / norm
    # Sign convention: h[2][2] >= 0, falling back to the first nonzero entry
    # in row-major order when h[2][2] is exactly zero.
    pivot = m[2, 2]
    if pivot == 0.0:
        flat = m.reshape(-1)
        pivot = flat[np.nonzero(flat)[0][0]]
    if pivot < 0.0:
        m = -m
    cond = float(np.linalg.cond(m))
    if not math.isfinite(cond) or cond > CONDITION_CAP:
        raise SingularHomography(f"condition number {cond:.3g} exceeds cap {CONDITION_CAP:.0e}")
    out = np.ascontiguousarray(m)
    out.setflags(write=False)
    return out


def apply_homography(h: Homography, p: tuple[float, float]) -> tuple[float, float]:
    """Apply the projective action of ``h`` to a single 2D point."""
    x, y = p
    q = h.h @ np.array([x, y, 1.0])
    if abs(q[2]) < 1e-12:
        raise DegeneratePoint(f"point {p} mapped to w' = {q[2]:.3g}")
    return (float(q[0] / q[2]), float(q[1] / q[2]))


def crop_with_margin(
    img: RasterImage, b: BBox, margin_frac: float
) -> tuple[RasterImage, tuple[int, int]]:
    """Crop ``b`` expanded by ``margin_frac`` of each side length, clamped to bounds.

    Returns the crop and the integer (x, y) offset of its top-left corner in
    the source image, for mapping crop coordinates back to image coordinates.
    """
    if margin_frac < 0:
        raise ValueError(f"margin_frac must be >= 0, got {margin_frac}")
    mx = margin_frac * b.width
    my = margin_frac * b.height
    x1 = max(0.0, b.x1 - mx)
    y1 = max(0.0, b.y1 - my)
    x2 = min(float(img.width), b.x2 + mx)
    y2 = min(float(img.height), b.y2 + my)
    if x2 <= x1 or y2 <= y1:
        raise EmptyIntersection(f"box {b.as_list()} lies outside a "
                                f"{img.width}x{img.height} image")
    ix1, iy1 = int(math.floor(x1)), int(math.floor(y1))
    ix2, iy2 = int(math.ceil(x2)), int(math.ceil(y2))
    crop = RasterImage(np.ascontiguousarray(img.pixels[iy1:iy2, ix1:ix2]))
    return crop, (ix1, iy1)


@dataclass(frozen=True)
class SampleRecord:
    """One evaluation unit: target/reference refs, telemetry, and ground truth.

    ``composite``/``homography``/``mean_distance``/``selected_ref`` are filled
    in once the pair-construction stage has run; they stay ``None`` before.
    """

    sample_id: str
    target_image: str
    reference_image: str | None = None
    telemetry: Telemetry | None = None
    ground_truth: tuple[LabeledBox, ...] = ()
    composite: str | None = None
    homography: Homography | None = None
    mean_distance: float | None = None
    selected_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise ValueError("sample_id must be non-empty")
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
