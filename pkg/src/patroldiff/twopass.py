"""Two-pass inference: localize on the composite, relabel from tight crops.

Pass 1 sends the whole target|reference composite with a difference prompt
naming every vocabulary class and parses box detections from the reply.
Pass 2 crops each detection (with margin) out of the target image and asks
for the label alone; boxes never change and detections are never added or
removed, so the final detection list is the pass-1 list relabelled.

The same two-pass shape is exported as fine-tuning records: a full-composite
detection record per sample, and a crop classification record per
ground-truth box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .client import (
    ModelClient,
    ModelRequest,
    encode_image,
    parse_detections,
    prompt_trailer,
)
from .core import AnomalyVocabulary, BBox, LabeledBox, RasterImage, crop_with_margin
from .errors import (
    EmptyIntersection,
    ExhaustedRetries,
    ProtocolError,
    RequestTimeout,
)
from .synth import PromptStyle, render_class_list

DEFAULT_CROP_MARGIN = 0.1

# Appended to pass-1 prompts so replies are machine-checkable.
OUTPUT_GRAMMAR_SUFFIX = (
    ' Respond with a JSON array of objects of the form '
    '{"bbox": [x1, y1, x2, y2], "label": "<class>"} using pixel coordinates '
    'of the full image, or [] if nothing is missing.'
)


def pass1_prompt(vocab: AnomalyVocabulary, style: PromptStyle | None = None) -> str:
    """Difference prompt over the full vocabulary (deployed inference cannot
    know which anomalies are present, and dummies are a training-only device)."""
    style = style or PromptStyle.specific()
    template = style.templates[0]
    if style.variant == "specific":
        body = template.format(classes=render_class_list(vocab.labels))
    else:
        body = template
    return body + OUTPUT_GRAMMAR_SUFFIX


def pass2_prompt(vocab: AnomalyVocabulary) -> str:
    return (f"Which one of the following labels best describes the object: "
            f"{render_class_list(vocab.labels)}? Answer with the label only.")


@dataclass(frozen=True)
class PassOneResult:
    detections: tuple[LabeledBox, ...]
    raw_text: str
    parse_warnings: int
    side_violations: int


@dataclass(frozen=True)
class DetectionProvenance:
    pass1_label: str
    pass2_label: str
    crop_bbox: BBox | None


@dataclass(frozen=True)
class FinalResult:
    detections: tuple[LabeledBox, ...]
    provenance: tuple[DetectionProvenance, ...]
    label_fallbacks: int

    def __post_init__(self) -> None:
        if len(self.detections) != len(self.provenance):
            raise ValueError("one provenance entry per detection required")


def run_pass1(
    composite: RasterImage,
    vocab: AnomalyVocabulary,
    client: ModelClient,
    sample_id: str,
    style: PromptStyle | None = None,
    target_width: int | None = None,
    max_tokens: int = 2048,
) -> PassOneResult:
    """Detect anomaly candidates over the whole composite.

    Detections whose centre falls in the reference (right) half are dropped
    and counted as side violations; surviving boxes are already valid target
    coordinates since the target occupies x in [0, target_width).
    """
    if target_width is None:
        target_width = composite.width // 2
    prompt = pass1_prompt(vocab, style) + prompt_trailer(sample_id)
    request = ModelRequest(prompt=prompt, image_b64=encode_image(composite),
                           max_tokens=max_tokens, temperature=0.0)
    response = client.send(request)
    parsed = parse_detections(response.text, (composite.width, composite.height))
    kept = []
    violations = 0
    for det in parsed.boxes:
        cx, _ = det.bbox.center
        if cx < target_width:
            kept.append(det)
        else:
            violations += 1
    return PassOneResult(
        detections=tuple(kept),
        raw_text=response.text,
        parse_warnings=parsed.dropped,
        side_violations=violations,
    )


def run_pass2(
    target: RasterImage,
    pass1: PassOneResult,
    vocab: AnomalyVocabulary,
    client: ModelClient,
    sample_id: str,
    margin_frac: float = DEFAULT_CROP_MARGIN,
    max_tokens: int = 32,
) -> FinalResult:
    """Re-estimate each pass-1 label from a tight crop; boxes unchanged.

    Out-of-vocabulary answers and failed crop requests fall back to the
    pass-1 label (counted), keeping the detection count invariant.
    """
    question = pass2_prompt(vocab)
    detections: list[LabeledBox] = []
    provenance: list[DetectionProvenance] = []
    fallbacks = 0
    for det in pass1.detections:
        label = det.label
        crop_box: BBox | None = None
        try:
            crop, (ox, oy) = crop_with_margin(target, det.bbox, margin_frac)
            crop_box = BBox(float(ox), float(oy),
                            float(ox + crop.width), float(oy + crop.height))
            request = ModelRequest(
                prompt=question + prompt_trailer(sample_id, crop_box),
                image_b64=encode_image(crop),
                max_tokens=max_tokens,
                temperature=0.0,
            )
            answer = client.send(request).text.strip()
            if answer in vocab:
                label = answer
            else:
                fallbacks += 1
        except (EmptyIntersection, RequestTimeout, ExhaustedRetries, ProtocolError):
            fallbacks += 1
        detections.append(LabeledBox(det.bbox, label))
        provenance.append(DetectionProvenance(
            pass1_label=det.label, pass2_label=label, crop_bbox=crop_box))
    return FinalResult(tuple(detections), tuple(provenance), fallbacks)


def single_pass_result(pass1: PassOneResult) -> FinalResult:
    """Pass-1 detections promoted to final, for the single-pass ablation."""
    return FinalResult(
        detections=pass1.detections,
        provenance=tuple(DetectionProvenance(d.label, d.label, None)
                         for d in pass1.detections),
        label_fallbacks=0,
    )


def inference_row(
    sample_id: str, pass1: PassOneResult, final: FinalResult
) -> dict:
    """JSONL row for one inferred sample."""
    return {
        "sample_id": sample_id,
        "detections": [
            {"bbox": det.bbox.as_list(), "label": det.label,
             "pass1_label": prov.pass1_label}
            for det, prov in zip(final.detections, final.provenance)
        ],
        "warnings": {
            "parse_dropped": pass1.parse_warnings,
            "side_violations": pass1.side_violations,
            "label_fallbacks": final.label_fallbacks,
        },
    }


# ---------------------------------------------------------------------------
# Fine-tuning export
# ---------------------------------------------------------------------------

def detections_answer(gts: Sequence[LabeledBox]) -> str:
    """Ground truth rendered in the exact output grammar the parser reads."""
    return json.dumps([{"bbox": lb.bbox.as_list(), "label": lb.label}
                       for lb in gts])


def export_finetune_records(
    manifest,
    vocab: AnomalyVocabulary,
    out_dir: str | Path,
    margin_frac: float = DEFAULT_CROP_MARGIN,
    style: PromptStyle | None = None,
) -> tuple[list[dict], list[dict]]:
    """Build pass-1 and pass-2 training records from annotated pairs.

    ``manifest`` is a sequence of SampleRecords with composites built. One
    pass-1 record per sample (full composite -> GT detection array) and one
    pass-2 record per ground-truth box (margin crop -> label). Crop images
    are written under ``out_dir``/crops with deterministic names.
    """
    out_dir = Path(out_dir)
    crops_dir = out_dir / "crops"
    crops_dir.mkdir(parents=True, exist_ok=True)
    p1_prompt = pass1_prompt(vocab, style)
    p2_prompt = pass2_prompt(vocab)

    pass1_records: list[dict] = []
    pass2_records: list[dict] = []
    for rec in manifest:
        if rec.composite is None:
            raise ValueError(f"sample {rec.sample_id} has no composite built")
        pass1_records.append({
            "image": rec.composite,
            "prompt": p1_prompt,
            "answer": detections_answer(rec.ground_truth),
        })
        if not rec.ground_truth:
            continue
        target = RasterImage.load(rec.target_image)
        for idx, lb in enumerate(rec.ground_truth):
            crop, _ = crop_with_margin(target, lb.bbox, margin_frac)
            crop_path = crops_dir / f"{rec.sample_id}_{idx:03d}.png"
            crop.save(crop_path)
            pass2_records.append({
                "image": str(crop_path),
                "prompt": p2_prompt,
                "answer": lb.label,
            })
    return pass1_records, pass2_records
