"""Evaluation-pair construction: reference retrieval, matching, and alignment.

The stage pipeline is: retrieve candidate references near the target's
telemetry, match features against each candidate, keep the candidate with
the smallest average image-plane distance, fit a robust homography from the
correspondences, warp the reference into the target frame, and concatenate
target | warped reference into one composite.

The feature matcher here is a deterministic classical stack (Harris corners,
BRIEF-style binary patch descriptors, mutual nearest neighbour with a 0.8
distance-ratio test). Externally computed correspondences can be imported
instead via :func:`load_correspondences`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .core import Homography, RasterImage, Telemetry
from .errors import (
    ConsensusFailure,
    DegenerateConfiguration,
    InsufficientFeatures,
    MissingTelemetry,
    NoViableCandidate,
    RankDeficient,
    ShapeMismatch,
    SingularHomography,
)

EARTH_RADIUS_M = 6371000.0

# Matcher knobs. Fixed constants rather than config: the matcher is a
# deterministic built-in default, not a tuning surface.
_MAX_CORNERS = 1000
_HARRIS_K = 0.04
_CORNER_REL_THRESHOLD = 0.01
_DESCRIPTOR_BITS = 256
_PATCH_RADIUS = 15
_RATIO_TEST = 0.8

# RANSAC stops early once this confidence of having seen an all-inlier
# sample is reached (never exceeding the configured iteration cap).
_RANSAC_CONFIDENCE = 0.999


@dataclass(frozen=True)
class Correspondence:
    """A matched point pair: reference-image point, target-image point, score."""

    p_ref: tuple[float, float]
    p_tgt: tuple[float, float]
    score: float = 1.0

    def __post_init__(self) -> None:
        vals = (*self.p_ref, *self.p_tgt, self.score)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"correspondence values must be finite, got {vals}")


@dataclass(frozen=True)
class MatchResult:
    """Correspondence set plus the mean image-plane displacement in pixels."""

    correspondences: tuple[Correspondence, ...]
    mean_distance: float

    @classmethod
    def from_correspondences(cls, corrs: Sequence[Correspondence]) -> "MatchResult":
        corrs = tuple(corrs)
        dists = [math.dist(c.p_ref, c.p_tgt) for c in corrs]
        return cls(corrs, float(np.mean(dists)) if dists else float("nan"))


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 2000
    inlier_threshold: float = 3.0
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be > 0")


# ---------------------------------------------------------------------------
# Candidate retrieval
# ---------------------------------------------------------------------------

def telemetry_distance_m(a: Telemetry, b: Telemetry) -> float:
    """3D distance in metres, lat/lon flattened equirectangularly about ``a``.

    Patrol flights span well under a kilometre, where the equirectangular
    approximation differs from great-circle distance by far less than GPS
    noise.
    """
    lat0 = math.radians(a.latitude)
    dx = math.radians(b.longitude - a.longitude) * math.cos(lat0) * EARTH_RADIUS_M
    dy = math.radians(b.latitude - a.latitude) * EARTH_RADIUS_M
    dz = b.altitude - a.altitude
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def retrieve_candidates(
    target: Telemetry | None,
    pool: Sequence[tuple[str, Telemetry]],
    k: int,
) -> list[str]:
    """The ``k`` pool entries closest to the target, ascending by distance.

    Ties keep pool order; returns the whole pool when ``k`` exceeds its size.
    """
    if target is None:
        raise MissingTelemetry("target sample has no telemetry")
    if not pool:
        raise ValueError("reference pool must be non-empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked = sorted(
        range(len(pool)),
        key=lambda i: (telemetry_distance_m(target, pool[i][1]), i),
    )
    return [pool[i][0] for i in ranked[:k]]


# ---------------------------------------------------------------------------
# Feature matching
# ---------------------------------------------------------------------------

def _brief_pattern() -> np.ndarray:
    """Fixed (bits, 4) array of integer (x1, y1, x2, y2) patch offsets."""
    rng = np.random.default_rng(20240501)
    pattern = rng.normal(0.0, _PATCH_RADIUS / 3.0, size=(_DESCRIPTOR_BITS, 4))
    return np.clip(np.rint(pattern), -_PATCH_RADIUS + 1, _PATCH_RADIUS - 1).astype(np.int64)


_PATTERN = _brief_pattern()
_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)


def _harris_corners(gray: np.ndarray) -> np.ndarray:
    """(n, 2) corner coordinates (x, y), strongest first, deterministic order."""
    gy, gx = np.gradient(gray)
    sxx = gaussian_filter(gx * gx, 1.5)
    syy = gaussian_filter(gy * gy, 1.5)
    sxy = gaussian_filter(gx * gy, 1.5)
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    resp = det - _HARRIS_K * tr * tr

    peak = float(resp.max())
    if peak <= 0.0:
        return np.zeros((0, 2), dtype=np.int64)
    # Anchor the threshold to a high quantile rather than the raw maximum:
    # a single huge edge response (black fill borders, letterboxing) must
    # not drown every real corner.
    scale = float(np.quantile(resp[resp > 0.0], 0.995))
    is_max = resp == maximum_filter(resp, size=5)
    strong = is_max & (resp > max(_CORNER_REL_THRESHOLD * scale, 1e-4))
    # Keep corners far enough from the border for full descriptor patches.
    m = _PATCH_RADIUS + 1
    strong[:m, :] = False
    strong[-m:, :] = False
    strong[:, :m] = False
    strong[:, -m:] = False

    ys, xs = np.nonzero(strong)
    if len(xs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:_MAX_CORNERS]
    return np.column_stack([xs[order], ys[order]])


def _brief_descriptors(gray: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Packed binary descriptors, shape (n, bits / 8), from a smoothed patch."""
    sm = gaussian_filter(gray, 2.0)
    x = corners[:, 0][:, np.newaxis]
    y = corners[:, 1][:, np.newaxis]
    a = sm[y + _PATTERN[:, 1], x + _PATTERN[:, 0]]
    b = sm[y + _PATTERN[:, 3], x + _PATTERN[:, 2]]
    return np.packbits(a < b, axis=1)


def _hamming_matrix(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    xor = d1[:, np.newaxis, :] ^ d2[np.newaxis, :, :]
    return _POPCOUNT[xor].sum(axis=2, dtype=np.int32)


def match_features(ref: RasterImage, tgt: RasterImage) -> MatchResult:
    """Match the built-in classical way; deterministic for fixed inputs.

    Raises :class:`InsufficientFeatures` when fewer than 4 correspondences
    survive the mutual-nearest-neighbour and ratio filters.
    """
    for name, img in (("ref", ref), ("tgt", tgt)):
        if min(img.width, img.height) < 64:
            raise ValueError(f"{name} image too small to match: "
                             f"{img.width}x{img.height} (min dimension 64)")

    gray_ref = ref.to_gray()
    gray_tgt = tgt.to_gray()
    c_ref = _harris_corners(gray_ref)
    c_tgt = _harris_corners(gray_tgt)
    if len(c_ref) < 4 or len(c_tgt) < 4:
        raise InsufficientFeatures(
            f"too few corners: {len(c_ref)} in ref, {len(c_tgt)} in tgt")

    d_ref = _brief_descriptors(gray_ref, c_ref)
    d_tgt = _brief_descriptors(gray_tgt, c_tgt)
    dist = _hamming_matrix(d_ref, d_tgt)

    nn_fwd = dist.argmin(axis=1)
    nn_bwd = dist.argmin(axis=0)
    corrs: list[Correspondence] = []
    for i, j in enumerate(nn_fwd):
        if nn_bwd[j] != i:
            continue
        row = dist[i]
        d1 = row[j]
        second = np.partition(row, 1)[1] if len(row) > 1 else 0
        if second <= 0 or d1 >= _RATIO_TEST * second:
            continue
        corrs.append(Correspondence(
            p_ref=(float(c_ref[i, 0]), float(c_ref[i, 1])),
            p_tgt=(float(c_tgt[j, 0]), float(c_tgt[j, 1])),
            score=1.0 - d1 / _DESCRIPTOR_BITS,
        ))
    if len(corrs) < 4:
        raise InsufficientFeatures(f"only {len(corrs)} correspondences survived filtering")
    return MatchResult.from_correspondences(corrs)


def select_reference(candidates: Sequence[tuple[str, MatchResult | None]]) -> str:
    """Candidate with the smallest mean distance; ties keep list order.

    Entries whose matching failed are passed as ``None`` and are skipped.
    """
    if not candidates:
        raise ValueError("candidate list must be non-empty")
    best_id: str | None = None
    best_mean = math.inf
    for ref_id, result in candidates:
        if result is None:
            continue
        if result.mean_distance < best_mean:
            best_id = ref_id
            best_mean = result.mean_distance
    if best_id is None:
        raise NoViableCandidate("all candidate references failed matching")
    return best_id


# ---------------------------------------------------------------------------
# Homography estimation
# ---------------------------------------------------------------------------

def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to centroid origin, scale to mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    mean_dist = float(np.sqrt(((pts - c) ** 2).sum(axis=1)).mean())
    if mean_dist < 1e-12:
        raise DegenerateConfiguration("all points coincident")
    s = math.sqrt(2.0) / mean_dist
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, t


def _any_three_collinear(pts: np.ndarray) -> bool:
    """Collinearity among a minimal sample, tolerance scaled by point extent."""
    extent = pts.max(axis=0) - pts.min(axis=0)
    tol = 1e-6 * max(float(extent[0] * extent[1]), 1.0)
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                area = 0.5 * abs(u[0] * v[1] - u[1] * v[0])
                if area < tol:
                    return True
    return False


def estimate_homography_dlt(c: Sequence[Correspondence]) -> Homography:
    """Normalized DLT: smallest right singular vector of the 2n x 9 system.

    For minimal 4-point inputs, degeneracy (any collinear triple among the
    reference points, extent-scaled tolerance) is rejected up front; larger
    systems rely on the singular-value gap test.
    """
    if len(c) < 4:
        raise ValueError(f"at least 4 correspondences required, got {len(c)}")
    p_ref = np.array([cc.p_ref for cc in c], dtype=np.float64)
    p_tgt = np.array([cc.p_tgt for cc in c], dtype=np.float64)
    if len(c) == 4 and (_any_three_collinear(p_ref) or _any_three_collinear(p_tgt)):
        raise DegenerateConfiguration("collinear points in minimal sample")

    ref_n, t_ref = _hartley_normalize(p_ref)
    tgt_n, t_tgt = _hartley_normalize(p_tgt)

    n = len(c)
    x, y = ref_n[:, 0], ref_n[:, 1]
    u, v = tgt_n[:, 0], tgt_n[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.column_stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u])
    a[1::2] = np.column_stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v])

    _, s, vt = np.linalg.svd(a)
    sv = np.zeros(9)
    sv[: len(s)] = s
    if sv[7] - sv[8] <= 1e-9 * sv[0]:
        raise RankDeficient("smallest two singular values indistinguishable")
    h_norm = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(t_tgt) @ h_norm @ t_ref)


def _project_rows(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = np.column_stack([pts, np.ones(len(pts))]) @ m.T
    w = q[:, 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    out = q[:, :2] / w[:, np.newaxis]
    out[bad] = np.inf
    return out


def symmetric_transfer_error(h: Homography, p_ref: np.ndarray, p_tgt: np.ndarray) -> np.ndarray:
    """Per-correspondence mean of forward and backward transfer error (px)."""
    m = h.h
    m_inv = np.linalg.inv(m)
    fwd = np.linalg.norm(_project_rows(m, p_ref) - p_tgt, axis=1)
    bwd = np.linalg.norm(_project_rows(m_inv, p_tgt) - p_ref, axis=1)
    return 0.5 * (fwd + bwd)


def estimate_homography_ransac(
    c: Sequence[Correspondence], cfg: RansacConfig
) -> tuple[Homography, frozenset[int]]:
    """Seeded RANSAC over minimal 4-point samples, DLT refit on the consensus.

    The inlier test is the symmetric transfer error at ``cfg.inlier_threshold``.
    The returned set is recomputed against the refit homography; fewer than
    ``cfg.min_inliers`` survivors raise :class:`ConsensusFailure`. Identical
    inputs and seed give identical output.
    """
    n = len(c)
    if n < 4:
        raise ValueError(f"at least 4 correspondences required, got {n}")
    p_ref = np.array([cc.p_ref for cc in c], dtype=np.float64)
    p_tgt = np.array([cc.p_tgt for cc in c], dtype=np.float64)

    rng = np.random.default_rng(cfg.seed)
    best_count = 0
    best_inliers: np.ndarray | None = None
    budget = cfg.max_iterations
    it = 0
    while it < budget:
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = estimate_homography_dlt([c[i] for i in idx])
        except (DegenerateConfiguration, RankDeficient, SingularHomography):
            continue
        err = symmetric_transfer_error(h, p_ref, p_tgt)
        inliers = err <= cfg.inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            ratio = count / n
            if ratio >= 1.0:
                break
            # Standard adaptive stop: enough samples for an all-inlier draw.
            denom = math.log1p(-(ratio ** 4))
            if denom < 0.0:
                needed = math.ceil(math.log(1.0 - _RANSAC_CONFIDENCE) / denom)
                budget = min(cfg.max_iterations, max(it, needed))

    if best_inliers is None or best_count < 4:
        raise ConsensusFailure(f"no 4-point sample reached consensus over {n} correspondences")

    refit_idx = np.nonzero(best_inliers)[0]
    refit = estimate_homography_dlt([c[i] for i in refit_idx])
    final = symmetric_transfer_error(refit, p_ref, p_tgt) <= cfg.inlier_threshold
    final_idx = frozenset(int(i) for i in np.nonzero(final)[0])
    if len(final_idx) < cfg.min_inliers:
        raise ConsensusFailure(
            f"{len(final_idx)} inliers after refit, need >= {cfg.min_inliers}")
    return refit, final_idx


# ---------------------------------------------------------------------------
# Warping and composition
# ---------------------------------------------------------------------------

def warp_bilinear(src: RasterImage, out_to_src: np.ndarray, out_size: tuple[int, int]) -> RasterImage:
    """Inverse-map ``src`` through ``out_to_src``; bilinear, black outside."""
    out_w, out_h = out_size
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_size}")
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    ones = np.ones_like(xs)
    q = np.stack([xs, ys, ones], axis=-1) @ out_to_src.T
    w = q[..., 2]
    ok_w = np.abs(w) >= 1e-12
    w = np.where(ok_w, w, 1.0)
    sx = q[..., 0] / w
    sy = q[..., 1] / w

    h_src, w_src = src.height, src.width
    valid = ok_w & (sx >= 0.0) & (sx <= w_src - 1.0) & (sy >= 0.0) & (sy <= h_src - 1.0)
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w_src - 1)
    y1 = np.minimum(y0 + 1, h_src - 1)
    fx = (sx - x0)[..., np.newaxis]
    fy = (sy - y0)[..., np.newaxis]

    px = src.pixels.astype(np.float64)
    val = (px[y0, x0] * (1 - fx) * (1 - fy)
           + px[y0, x1] * fx * (1 - fy)
           + px[y1, x0] * (1 - fx) * fy
           + px[y1, x1] * fx * fy)
    val[~valid] = 0.0
    return RasterImage(np.clip(np.rint(val), 0, 255).astype(np.uint8))


def warp_reference(ref: RasterImage, h: Homography, out_size: tuple[int, int]) -> RasterImage:
    """Render the reference in the target frame defined by ``h`` (ref -> tgt)."""
    return warp_bilinear(ref, h.inverse().h, out_size)


def compose_pair(target: RasterImage, warped_ref: RasterImage) -> RasterImage:
    """Horizontal concatenation, target left, reference right.

    Ground-truth coordinates stay valid unchanged: the target occupies
    x in [0, target.width).
    """
    if target.height != warped_ref.height or target.channels != warped_ref.channels:
        raise ShapeMismatch(
            f"target {target.height}x{target.width}x{target.channels} vs "
            f"reference {warped_ref.height}x{warped_ref.width}x{warped_ref.channels}")
    return RasterImage(np.hstack([target.pixels, warped_ref.pixels]))


# ---------------------------------------------------------------------------
# Correspondence import (pluggable matcher escape hatch)
# ---------------------------------------------------------------------------

def load_correspondences(path: str | Path) -> list[Correspondence]:
    """Read JSON Lines of {"ref": [x, y], "tgt": [x, y], "score": s}."""
    out: list[Correspondence] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(Correspondence(
                    p_ref=(float(obj["ref"][0]), float(obj["ref"][1])),
                    p_tgt=(float(obj["tgt"][0]), float(obj["tgt"][1])),
                    score=float(obj.get("score", 1.0)),
                ))
            except (KeyError, IndexError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad correspondence row: {exc}") from exc
    return out
