"""Per-sample F1 scoring of detections against ground truth.

Scoring is per image pair: a maximum-cardinality one-to-one matching between
predictions and ground truth defines TP/FP/FN for that sample, each sample
gets its own F1, and the run-level number is the arithmetic mean over
samples (macro-F1). A global box-level metric would let box-heavy images
dominate; the per-sample form weights every pair equally.

Two operational conditions are scored: ``bbox_only`` (a prediction matches a
ground-truth box when IoU >= threshold) and ``bbox_label`` (IoU and exact
string-equal label).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import AnomalyVocabulary, BBox, LabeledBox, SampleRecord, geo_mean_size, iou
from .errors import EmptyEvaluation, TooFewBoxes

CONDITIONS = ("bbox_only", "bbox_label")


@dataclass(frozen=True)
class EvalCondition:
    variant: str = "bbox_only"
    iou_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.variant not in CONDITIONS:
            raise ValueError(f"variant must be one of {CONDITIONS}, got {self.variant!r}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


@dataclass(frozen=True)
class SampleCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class SampleScore:
    f1: float


@dataclass(frozen=True)
class MacroScore:
    m: float
    n: int


def _admissible(pred: LabeledBox, gt: LabeledBox, cond: EvalCondition) -> bool:
    if iou(pred.bbox, gt.bbox) < cond.iou_threshold:
        return False
    return cond.variant == "bbox_only" or pred.label == gt.label


def match_sample(
    preds: Sequence[LabeledBox],
    gts: Sequence[LabeledBox],
    cond: EvalCondition,
) -> tuple[SampleCounts, list[tuple[int, int]]]:
    """Maximum-cardinality matching over the admissibility graph.

    Returns the counts and the matched (pred_index, gt_index) pairs. Kuhn's
    augmenting-path algorithm guarantees TP is the maximum possible, so the
    result does not depend on the order boxes arrive in.
    """
    adj: list[list[int]] = [
        [g for g, gt in enumerate(gts) if _admissible(p, gt, cond)]
        for p in preds
    ]
    gt_owner: list[int | None] = [None] * len(gts)

    def augment(p: int, seen: list[bool]) -> bool:
        for g in adj[p]:
            if seen[g]:
                continue
            seen[g] = True
            if gt_owner[g] is None or augment(gt_owner[g], seen):
                gt_owner[g] = p
                return True
        return False

    tp = 0
    for p in range(len(preds)):
        if augment(p, [False] * len(gts)):
            tp += 1
    pairs = sorted((gt_owner[g], g) for g in range(len(gts)) if gt_owner[g] is not None)
    return SampleCounts(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp), pairs


def sample_f1(c: SampleCounts) -> SampleScore:
    """2TP / (2TP + FP + FN); a sample with nothing to find and nothing
    predicted scores 1.0 (correct "no anomaly" verdict)."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return SampleScore(1.0)
    return SampleScore(2.0 * c.tp / denom)


def macro_f1(scores: Sequence[SampleScore]) -> MacroScore:
    if not scores:
        raise EmptyEvaluation("macro average over zero samples")
    # fsum: correctly-rounded, so the mean is exactly reorder-invariant.
    return MacroScore(m=math.fsum(s.f1 for s in scores) / len(scores),
                      n=len(scores))


# ---------------------------------------------------------------------------
# Sample filtering (state-driven exclusion, size thresholds)
# ---------------------------------------------------------------------------

def filter_samples(
    manifest: Sequence[SampleRecord],
    exclude_state_driven: bool,
    size_threshold_px: float,
    vocab: AnomalyVocabulary,
    size_mode: str = "any",
) -> list[SampleRecord]:
    """Drop state-driven samples and samples under the size threshold.

    ``size_mode='any'`` drops a sample when any ground-truth box has
    geometric-mean size below the threshold; ``'all'`` only when every box
    does. Samples without ground truth are never dropped.
    """
    if size_mode not in ("any", "all"):
        raise ValueError(f"size_mode must be 'any' or 'all', got {size_mode!r}")
    kept = []
    for rec in manifest:
        if exclude_state_driven and any(
                lb.label in vocab.state_driven for lb in rec.ground_truth):
            continue
        if rec.ground_truth and size_threshold_px > 0:
            below = [geo_mean_size(lb.bbox) < size_threshold_px
                     for lb in rec.ground_truth]
            if (size_mode == "any" and any(below)) or \
               (size_mode == "all" and all(below)):
                continue
        kept.append(rec)
    return kept


def quartile_agreement(
    boxes_with_flags: Sequence[tuple[BBox, bool]],
) -> tuple[float, float, float, float]:
    """Agreement rate per size quartile of the ground-truth pool.

    Boxes sort ascending by geometric-mean size into four bins of (nearly)
    equal count; a bin's rate is its matched count divided by the total box
    count, so all four rates sum to matched/total and cap near 0.25 each.
    """
    n = len(boxes_with_flags)
    if n < 4:
        raise TooFewBoxes(f"need at least 4 boxes for quartiles, got {n}")
    ranked = sorted(range(n), key=lambda i: (geo_mean_size(boxes_with_flags[i][0]), i))
    base, rem = divmod(n, 4)
    rates = []
    start = 0
    for q in range(4):
        size = base + (1 if q < rem else 0)
        members = ranked[start:start + size]
        start += size
        rates.append(sum(1 for i in members if boxes_with_flags[i][1]) / n)
    return tuple(rates)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Run evaluation and report emission
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleEvaluation:
    sample_id: str
    tp: int
    fp: int
    fn: int
    f1: float
    matches: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class ConditionReport:
    """Macro result for one condition under one filter combination."""

    condition: str
    state_driven_excluded: bool
    min_size_px: float
    n_retained: int
    n_total: int
    macro_f1: float | None
    samples: tuple[SampleEvaluation, ...]
    quartiles: tuple[float, float, float, float] | None
    quartile_size_caps: tuple[float, float, float, float] | None


def evaluate_run(
    manifest: Sequence[SampleRecord],
    predictions: Mapping[str, Sequence[LabeledBox]],
    vocab: AnomalyVocabulary,
    exclude_state_driven: bool = False,
    size_thresholds: Sequence[float] = (0.0,),
    size_mode: str = "any",
    iou_threshold: float = 0.5,
) -> list[ConditionReport]:
    """Score both conditions at every filter combination.

    ``predictions`` maps sample_id to that sample's final detections; samples
    missing from the mapping count as zero predictions.
    """
    reports: list[ConditionReport] = []
    for threshold in size_thresholds:
        retained = filter_samples(manifest, exclude_state_driven, threshold,
                                  vocab, size_mode)
        for variant in CONDITIONS:
            cond = EvalCondition(variant, iou_threshold)
            evals: list[SampleEvaluation] = []
            pool: list[tuple[BBox, bool]] = []
            for rec in retained:
                preds = list(predictions.get(rec.sample_id, ()))
                counts, pairs = match_sample(preds, rec.ground_truth, cond)
                evals.append(SampleEvaluation(
                    sample_id=rec.sample_id,
                    tp=counts.tp, fp=counts.fp, fn=counts.fn,
                    f1=sample_f1(counts).f1,
                    matches=tuple(pairs),
                ))
                matched_gts = {g for _, g in pairs}
                pool.extend((lb.bbox, g in matched_gts)
                            for g, lb in enumerate(rec.ground_truth))
            macro = macro_f1([SampleScore(e.f1) for e in evals]).m if evals else None
            quartiles = sizes = None
            if len(pool) >= 4:
                quartiles = quartile_agreement(pool)
                ranked = sorted(geo_mean_size(b) for b, _ in pool)
                base, rem = divmod(len(ranked), 4)
                caps, start = [], 0
                for q in range(4):
                    size = base + (1 if q < rem else 0)
                    caps.append(ranked[start + size - 1])
                    start += size
                sizes = tuple(caps)
            reports.append(ConditionReport(
                condition=variant,
                state_driven_excluded=exclude_state_driven,
                min_size_px=float(threshold),
                n_retained=len(retained),
                n_total=len(manifest),
                macro_f1=macro,
                samples=tuple(evals),
                quartiles=quartiles,
                quartile_size_caps=sizes,
            ))
    return reports


def _report_json_obj(r: ConditionReport) -> dict:
    return {
        "condition": r.condition,
        "filters": {
            "state_driven_excluded": r.state_driven_excluded,
            "min_size_px": r.min_size_px,
        },
        "n_retained": r.n_retained,
        "n_total": r.n_total,
        "macro_f1": r.macro_f1,
        "quartiles": list(r.quartiles) if r.quartiles else None,
        "samples": [
            {"sample_id": s.sample_id, "tp": s.tp, "fp": s.fp, "fn": s.fn,
             "f1": s.f1, "matches": [list(m) for m in s.matches]}
            for s in r.samples
        ],
    }


def _svg_bar_chart(
    title: str,
    groups: Sequence[str],
    series: Sequence[tuple[str, Sequence[float]]],
    y_max: float,
) -> str:
    """Tiny deterministic grouped-bar SVG; no external plotting dependency."""
    width, height = 640, 360
    left, bottom, top = 60, 40, 40
    plot_w = width - left - 20
    plot_h = height - bottom - top
    colors = ("#4878a8", "#e08840", "#60a860", "#b05858")
    n_groups, n_series = len(groups), len(series)
    group_w = plot_w / max(n_groups, 1)
    bar_w = group_w / (n_series + 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    out.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
               f'font-family="sans-serif" font-size="14">{title}</text>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" '
               f'stroke="#333"/>')
    out.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
               f'y2="{top + plot_h}" stroke="#333"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = top + plot_h * (1 - frac)
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{frac * y_max:.3g}</text>')
        out.append(f'<line x1="{left - 3}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" '
                   f'stroke="#333"/>')
    for gi, label in enumerate(groups):
        gx = left + gi * group_w
        out.append(f'<text x="{gx + group_w / 2:.1f}" y="{top + plot_h + 16}" '
                   f'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{label}</text>')
        for si, (_, values) in enumerate(series):
            v = values[gi]
            h = 0.0 if y_max <= 0 else plot_h * min(v / y_max, 1.0)
            x = gx + bar_w * (si + 0.5)
            out.append(f'<rect x="{x:.2f}" y="{top + plot_h - h:.2f}" '
                       f'width="{bar_w:.2f}" height="{h:.2f}" '
                       f'fill="{colors[si % len(colors)]}"/>')
    for si, (name, _) in enumerate(series):
        lx = left + 10 + si * 150
        out.append(f'<rect x="{lx}" y="{height - 18}" width="10" height="10" '
                   f'fill="{colors[si % len(colors)]}"/>')
        out.append(f'<text x="{lx + 14}" y="{height - 9}" font-family="sans-serif" '
                   f'font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(reports: Sequence[ConditionReport], out_dir: str | Path) -> list[Path]:
    """Write report.json, report.csv, and the two SVG charts.

    Output bytes are deterministic for deterministic inputs. CSV rows are
    omitted for empty filtered sets (macro undefined); the JSON entry still
    records the 0 / N bookkeeping.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    json_path = out_dir / "report.json"
    payload = [_report_json_obj(r) for r in reports]
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    written.append(json_path)

    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(["condition", "state_excluded", "min_size_px",
                     "n_retained", "n_total", "macro_f1"])
    for r in reports:
        if r.n_retained == 0 or r.macro_f1 is None:
            continue
        writer.writerow([r.condition, r.state_driven_excluded, r.min_size_px,
                         r.n_retained, r.n_total, repr(r.macro_f1)])
    csv_path = out_dir / "report.csv"
    csv_path.write_text(csv_buf.getvalue(), encoding="utf-8")
    written.append(csv_path)

    # Charts come from the first filter combination that produced quartiles.
    charted = [r for r in reports if r.quartiles is not None]
    if charted:
        key = (charted[0].state_driven_excluded, charted[0].min_size_px)
        group = [r for r in charted
                 if (r.state_driven_excluded, r.min_size_px) == key]
        agreement = _svg_bar_chart(
            "Agreement rate by size quartile",
            ["Q1", "Q2", "Q3", "Q4"],
            [(r.condition, list(r.quartiles)) for r in group],
            y_max=0.3,
        )
        svg1 = out_dir / "quartile_agreement.svg"
        svg1.write_text(agreement, encoding="utf-8")
        written.append(svg1)

        caps = group[0].quartile_size_caps
        if caps:
            sizes = _svg_bar_chart(
                "Ground-truth box size by quartile (geometric mean, px)",
                ["Q1", "Q2", "Q3", "Q4"],
                [("size cap", list(caps))],
                y_max=max(caps),
            )
            svg2 = out_dir / "size_distribution.svg"
            svg2.write_text(sizes, encoding="utf-8")
            written.append(svg2)
    return written
