"""Difference-detection training data: cut-paste injection and prompts.

A synthetic pair starts from a destination image. Masked objects are pasted
into a copy (the target); the untouched destination gets a mild affine
perturbation (the reference, simulating capture misalignment); the two are
concatenated target | reference. The tight box of each pasted object is the
supervision signal, and the prompt names the injected classes plus a few
"dummy" classes that are absent from the pair.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .align import compose_pair, warp_bilinear
from .core import BBox, Homography, LabeledBox, RasterImage, iou
from .errors import DummyPoolExhausted, EmptyMask, PlacementOutOfBounds, ShapeMismatch

logger = logging.getLogger(__name__)

# Pasted-object footprint as a fraction of the destination's short side,
# sampled per paste by the dataset generator.
_OBJECT_SIZE_FRAC = (0.08, 0.30)
_PLACEMENT_ATTEMPTS = 20
# Placements may overlap mildly, but a heavier overlap occludes the earlier
# object while its supervision box stays, corrupting the signal (and making
# a margin crop of either box ambiguous to label).
_MAX_OVERLAP_IOU = 0.3


@dataclass(frozen=True)
class MaskedObject:
    """A source image with a binary instance mask selecting one object."""

    image: RasterImage
    mask: np.ndarray
    label: str

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask).astype(bool)
        if mask.shape != (self.image.height, self.image.width):
            raise ValueError(
                f"mask shape {mask.shape} != image shape "
                f"{(self.image.height, self.image.width)}")
        mask = np.ascontiguousarray(mask)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        if not self.label.strip():
            raise ValueError("object label must be non-empty")
        object.__setattr__(self, "label", self.label.strip())

    @classmethod
    def from_files(cls, image_path: str, mask_path: str, label: str) -> "MaskedObject":
        image = RasterImage.load(image_path)
        mask_img = RasterImage.load(mask_path)
        if (mask_img.height, mask_img.width) != (image.height, image.width):
            raise ValueError(f"mask {mask_path} size does not match image {image_path}")
        return cls(image=image, mask=mask_img.to_gray() > 127, label=label)


@dataclass(frozen=True)
class PerturbationConfig:
    """Affine perturbation ranges for the reference image."""

    rotation_deg: tuple[float, float] = (-3.0, 3.0)
    translation_frac: tuple[float, float] = (-0.02, 0.02)
    scale: tuple[float, float] = (0.97, 1.03)
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("rotation_deg", "translation_frac", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range must be ordered, got ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class PromptStyle:
    """Instruction style: class-specific or abstract, with its templates."""

    variant: str
    templates: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.variant not in ("specific", "abstract"):
            raise ValueError(f"variant must be 'specific' or 'abstract', got {self.variant!r}")
        if not self.templates:
            raise ValueError("at least one template required")
        for t in self.templates:
            has_slot = "{classes}" in t
            if self.variant == "specific" and not has_slot:
                raise ValueError(f"specific template lacks {{classes}} slot: {t!r}")
            if self.variant == "abstract" and has_slot:
                raise ValueError(f"abstract template must not take a class list: {t!r}")

    @classmethod
    def specific(cls) -> "PromptStyle":
        return cls("specific", (
            "Find the bounding boxes of objects that are present in the left image "
            "but missing in the right image: {classes}",
            "Detect all items of the specified classes that appear in the left frame "
            "but are not found in the right frame: {classes}",
        ))

    @classmethod
    def abstract(cls) -> "PromptStyle":
        return cls("abstract", (
            "Find the bounding boxes of objects that are present in the left image "
            "but missing in the right image.",
            "Detect all objects that appear in the left frame but are not found in "
            "the right frame.",
        ))


@dataclass(frozen=True)
class SynthRecord:
    """One generated pair with supervision, prompt, and constituent images."""

    sample_id: str
    composite: RasterImage
    target: RasterImage
    reference: RasterImage
    injected: tuple[LabeledBox, ...]
    prompt: str
    prompt_classes: tuple[str, ...]


def render_class_list(classes: Sequence[str]) -> str:
    return "[" + ", ".join(classes) + "]"


# ---------------------------------------------------------------------------
# Pasting
# ---------------------------------------------------------------------------

def _tight_window(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(x1, y1, x2, y2) integer window of foreground pixels; EmptyMask if none."""
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise EmptyMask("mask has no foreground pixels")
    y1, y2 = np.nonzero(rows)[0][[0, -1]]
    x1, x2 = np.nonzero(cols)[0][[0, -1]]
    return int(x1), int(y1), int(x2) + 1, int(y2) + 1


def _resize_nearest_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    out_w, out_h = size
    h, w = mask.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return mask[rows[:, np.newaxis], cols[np.newaxis, :]]


def _resize_bilinear(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a (h, w, c) uint8 array."""
    out_w, out_h = size
    h, w = pixels.shape[:2]
    sx = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    sy = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[np.newaxis, :, np.newaxis]
    fy = (sy - y0)[:, np.newaxis, np.newaxis]
    px = pixels.astype(np.float64)
    val = (px[np.ix_(y0, x0)] * (1 - fx) * (1 - fy)
           + px[np.ix_(y0, x1)] * fx * (1 - fy)
           + px[np.ix_(y1, x0)] * (1 - fx) * fy
           + px[np.ix_(y1, x1)] * fx * fy)
    return np.clip(np.rint(val), 0, 255).astype(np.uint8)


def scaled_object_size(obj: MaskedObject, scale: float) -> tuple[int, int]:
    """(w, h) of the object's tight window after scaling."""
    x1, y1, x2, y2 = _tight_window(obj.mask)
    return (max(1, round((x2 - x1) * scale)), max(1, round((y2 - y1) * scale)))


def paste_object(
    dst: RasterImage, obj: MaskedObject, placement: tuple[float, float, float]
) -> tuple[RasterImage, BBox]:
    """Paste the masked object at ``(x, y)`` with isotropic ``scale``.

    ``(x, y)`` anchors the top-left of the scaled tight window (rounded to
    pixels). The mask scales nearest-neighbour, the colour bilinearly; the
    returned box is the exact tight bounding box of the pasted foreground.
    """
    if obj.image.channels != dst.channels:
        raise ShapeMismatch(
            f"object has {obj.image.channels} channels, destination {dst.channels}")
    x, y, scale = placement
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    x0, y0 = round(x), round(y)

    wx1, wy1, wx2, wy2 = _tight_window(obj.mask)
    crop_mask = obj.mask[wy1:wy2, wx1:wx2]
    crop_color = obj.image.pixels[wy1:wy2, wx1:wx2]
    sw = max(1, round((wx2 - wx1) * scale))
    sh = max(1, round((wy2 - wy1) * scale))
    mask_s = _resize_nearest_mask(crop_mask, (sw, sh))
    color_s = _resize_bilinear(crop_color, (sw, sh))

    # Downscaling can drop thin strokes entirely; re-tighten on the result.
    tx1, ty1, tx2, ty2 = _tight_window(mask_s)
    mask_s = mask_s[ty1:ty2, tx1:tx2]
    color_s = color_s[ty1:ty2, tx1:tx2]
    ph, pw = mask_s.shape

    if x0 < 0 or y0 < 0 or x0 + pw > dst.width or y0 + ph > dst.height:
        raise PlacementOutOfBounds(
            f"{pw}x{ph} object at ({x0}, {y0}) exceeds "
            f"{dst.width}x{dst.height} destination")

    out = dst.pixels.copy()
    region = out[y0:y0 + ph, x0:x0 + pw]
    region[mask_s] = color_s[mask_s]
    return RasterImage(out), BBox(float(x0), float(y0), float(x0 + pw), float(y0 + ph))


# ---------------------------------------------------------------------------
# Reference perturbation
# ---------------------------------------------------------------------------

def _affine_about_center(
    size: tuple[int, int], rot_deg: float, tx: float, ty: float, scale: float
) -> np.ndarray:
    w, h = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(rot_deg)
    a = scale * math.cos(th)
    b = scale * math.sin(th)
    # p' = s R (p - c) + c + t
    return np.array([
        [a, -b, tx + cx - a * cx + b * cy],
        [b, a, ty + cy - b * cx - a * cy],
        [0.0, 0.0, 1.0],
    ])


def perturb_reference(
    ref: RasterImage, cfg: PerturbationConfig
) -> tuple[RasterImage, Homography]:
    """Warp by a seeded affine (rotation about centre, translation, scale).

    Translation is sampled as a fraction of image width on both axes. Returns
    the warped image (bilinear, black fill) and the transform mapping original
    coordinates to perturbed coordinates.
    """
    rng = np.random.default_rng(cfg.seed)
    rot = rng.uniform(*cfg.rotation_deg)
    tx = rng.uniform(*cfg.translation_frac) * ref.width
    ty = rng.uniform(*cfg.translation_frac) * ref.width
    scale = rng.uniform(*cfg.scale)
    m = _affine_about_center((ref.width, ref.height), rot, tx, ty, scale)
    warped = warp_bilinear(ref, np.linalg.inv(m), (ref.width, ref.height))
    return warped, Homography(m)


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------

def build_prompt(
    style: PromptStyle,
    actual: Sequence[str],
    dummy_pool: Sequence[str],
    n_dummies: int,
    seed: int,
) -> tuple[str, list[str]]:
    """Render a seeded prompt; returns (text, shuffled actual + dummy classes)."""
    if n_dummies < 0:
        raise ValueError("n_dummies must be >= 0")
    if n_dummies > len(dummy_pool):
        raise DummyPoolExhausted(
            f"{n_dummies} dummies requested from a pool of {len(dummy_pool)}")
    overlap = set(actual) & set(dummy_pool)
    if overlap:
        raise ValueError(f"dummy pool overlaps actual classes: {sorted(overlap)}")
    if style.variant == "specific" and len(actual) + n_dummies == 0:
        raise ValueError("specific style needs at least one class to name")

    rng = np.random.default_rng(seed)
    template = style.templates[int(rng.integers(len(style.templates)))]
    dummy_idx = rng.choice(len(dummy_pool), size=n_dummies, replace=False) \
        if dummy_pool else np.empty(0, dtype=np.int64)
    classes = list(actual) + [dummy_pool[int(i)] for i in dummy_idx]
    classes = [classes[int(i)] for i in rng.permutation(len(classes))]

    if style.variant == "specific":
        text = template.format(classes=render_class_list(classes))
    else:
        text = template
    return text, classes


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def generate_synth_dataset(
    destinations: Sequence[RasterImage],
    objects: Sequence[MaskedObject],
    cfg: PerturbationConfig,
    style: PromptStyle,
    n: int,
    seed: int,
    max_objects: int = 3,
    dummy_range: tuple[int, int] = (2, 5),
) -> Iterator[SynthRecord]:
    """Yield ``n`` synthetic pairs, fully determined by ``seed``.

    Each record derives its own generator from ``seed ^ index``, so records
    are independent of each other and of generation order. Placements that
    would overlap an already-injected box beyond IoU 0.3 are resampled, and
    objects that fail placement after 20 attempts (or have empty masks) are
    skipped with a warning; a record ends up with 1..``max_objects`` pasted
    objects, or zero when every paste failed.
    """
    if not destinations or not objects:
        raise ValueError("destinations and objects must be non-empty")
    if n < 0:
        raise ValueError("n must be >= 0")

    all_labels = list(dict.fromkeys(obj.label for obj in objects))

    for index in range(n):
        rng = np.random.default_rng(seed ^ index)
        dest = destinations[int(rng.integers(len(destinations)))]

        target = dest
        injected: list[LabeledBox] = []
        n_objects = int(rng.integers(1, max_objects + 1))
        for _ in range(n_objects):
            obj = objects[int(rng.integers(len(objects)))]
            placed = False
            for _attempt in range(_PLACEMENT_ATTEMPTS):
                frac = rng.uniform(*_OBJECT_SIZE_FRAC)
                try:
                    base_w, base_h = scaled_object_size(obj, 1.0)
                except EmptyMask:
                    logger.warning("skipping object %r: empty mask", obj.label)
                    break
                scale = frac * min(dest.width, dest.height) / math.sqrt(base_w * base_h)
                sw, sh = scaled_object_size(obj, scale)
                if sw >= dest.width or sh >= dest.height:
                    continue
                x = int(rng.integers(0, dest.width - sw + 1))
                y = int(rng.integers(0, dest.height - sh + 1))
                try:
                    candidate, box = paste_object(target, obj, (x, y, scale))
                except PlacementOutOfBounds:
                    continue
                if any(iou(box, lb.bbox) > _MAX_OVERLAP_IOU for lb in injected):
                    continue
                target = candidate
                injected.append(LabeledBox(box, obj.label))
                placed = True
                break
            if not placed:
                logger.warning("skipping object %r after %d placement attempts",
                               obj.label, _PLACEMENT_ATTEMPTS)

        reference, _ = perturb_reference(
            dest, replace(cfg, seed=int(rng.integers(2 ** 63))))
        composite = compose_pair(target, reference)

        actual = list(dict.fromkeys(lb.label for lb in injected))
        dummy_pool = [lbl for lbl in all_labels if lbl not in actual]
        n_dummies = min(int(rng.integers(dummy_range[0], dummy_range[1] + 1)),
                        len(dummy_pool))
        if style.variant == "specific" and len(actual) + n_dummies == 0:
            logger.warning("skipping record %d: no classes to prompt", index)
            continue
        prompt, classes = build_prompt(style, actual, dummy_pool, n_dummies,
                                       seed=int(rng.integers(2 ** 63)))

        yield SynthRecord(
            sample_id=f"synth-{index:06d}",
            composite=composite,
            target=target,
            reference=reference,
            injected=tuple(injected),
            prompt=prompt,
            prompt_classes=tuple(classes),
        )
