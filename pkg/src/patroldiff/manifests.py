"""JSON Lines manifest ingestion and run persistence.

All pipeline files are JSONL: streamable, diff-able, append-safe. Paths
inside a manifest are resolved relative to the manifest's own directory, so
a run directory can be moved wholesale. Writers go through a
write-temp-then-rename helper, never leaving half files behind.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Sequence

from .core import (
    AnomalyVocabulary,
    BBox,
    Homography,
    LabeledBox,
    SampleRecord,
    Telemetry,
)
from .errors import ManifestError


def atomic_write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> Path:
    return atomic_write_text(
        path, "".join(json.dumps(row) + "\n" for row in rows))


def read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def _resolve(base: Path, ref: str | None) -> str | None:
    if ref is None:
        return None
    p = Path(ref)
    return str(p) if p.is_absolute() else str((base / p))


def _parse_labeled_boxes(raw, where: str) -> tuple[LabeledBox, ...]:
    out = []
    for i, entry in enumerate(raw or []):
        try:
            coords = entry["bbox"]
            out.append(LabeledBox(
                BBox(float(coords[0]), float(coords[1]),
                     float(coords[2]), float(coords[3])),
                str(entry["label"]),
            ))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: bad ground-truth box {i}: {exc}") from exc
    return tuple(out)


def _parse_telemetry(raw, where: str) -> Telemetry | None:
    if raw is None:
        return None
    try:
        return Telemetry(latitude=float(raw["latitude"]),
                         longitude=float(raw["longitude"]),
                         altitude=float(raw["altitude"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: bad telemetry: {exc}") from exc


def load_sample_manifest(path: str | Path) -> list[SampleRecord]:
    """Load SampleRecords; accepts plain, paired, and synth-output rows.

    Degenerate ground-truth boxes fail loudly with the offending record named
    rather than being silently dropped.
    """
    path = Path(path)
    base = path.parent
    records: list[SampleRecord] = []
    seen: set[str] = set()
    for lineno, row in read_jsonl(path):
        where = f"{path}:{lineno}"
        sample_id = row.get("sample_id")
        if not sample_id or not isinstance(sample_id, str):
            raise ManifestError(f"{where}: missing sample_id")
        if sample_id in seen:
            raise ManifestError(f"{where}: duplicate sample_id {sample_id!r}")
        seen.add(sample_id)
        where = f"{path}:{lineno} (sample {sample_id})"
        if "target_image" not in row:
            raise ManifestError(f"{where}: missing target_image")
        gt_raw = row.get("ground_truth", row.get("injected"))
        homography = None
        if row.get("homography") is not None:
            try:
                homography = Homography.from_flat(row["homography"])
            except (ValueError, TypeError) as exc:
                raise ManifestError(f"{where}: bad homography: {exc}") from exc
        records.append(SampleRecord(
            sample_id=sample_id,
            target_image=_resolve(base, row["target_image"]),
            reference_image=_resolve(base, row.get("reference_image")),
            telemetry=_parse_telemetry(row.get("telemetry"), where),
            ground_truth=_parse_labeled_boxes(gt_raw, where),
            composite=_resolve(base, row.get("composite")),
            homography=homography,
            mean_distance=(None if row.get("mean_distance") is None
                           else float(row["mean_distance"])),
            selected_ref=row.get("selected_ref"),
        ))
    return records


def sample_row(rec: SampleRecord, base: Path | None = None) -> dict:
    """Serialize a record; paths are made relative to ``base`` when possible."""

    def rel(p: str | None) -> str | None:
        if p is None or base is None:
            return p
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return p

    row: dict = {
        "sample_id": rec.sample_id,
        "target_image": rel(rec.target_image),
    }
    if rec.reference_image is not None:
        row["reference_image"] = rel(rec.reference_image)
    if rec.telemetry is not None:
        row["telemetry"] = {
            "latitude": rec.telemetry.latitude,
            "longitude": rec.telemetry.longitude,
            "altitude": rec.telemetry.altitude,
        }
    row["ground_truth"] = [
        {"bbox": lb.bbox.as_list(), "label": lb.label} for lb in rec.ground_truth
    ]
    if rec.composite is not None:
        row["composite"] = rel(rec.composite)
    if rec.homography is not None:
        row["homography"] = rec.homography.as_flat()
    if rec.mean_distance is not None:
        row["mean_distance"] = rec.mean_distance
    if rec.selected_ref is not None:
        row["selected_ref"] = rec.selected_ref
    return row


def load_reference_pool(path: str | Path) -> list[tuple[str, str, Telemetry]]:
    """Rows of {"ref_id", "image", "telemetry"} -> (id, image path, telemetry)."""
    path = Path(path)
    base = path.parent
    pool = []
    seen: set[str] = set()
    for lineno, row in read_jsonl(path):
        where = f"{path}:{lineno}"
        ref_id = row.get("ref_id")
        if not ref_id or not isinstance(ref_id, str):
            raise ManifestError(f"{where}: missing ref_id")
        if ref_id in seen:
            raise ManifestError(f"{where}: duplicate ref_id {ref_id!r}")
        seen.add(ref_id)
        if "image" not in row:
            raise ManifestError(f"{where}: missing image")
        tel = _parse_telemetry(row.get("telemetry"), where)
        if tel is None:
            raise ManifestError(f"{where}: reference pool rows need telemetry")
        pool.append((ref_id, _resolve(base, row["image"]), tel))
    return pool


def load_object_manifest(path: str | Path) -> list[tuple[str, str, str]]:
    """Rows of {"image", "mask", "label"} -> (image path, mask path, label)."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, row in read_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            out.append((_resolve(base, row["image"]),
                        _resolve(base, row["mask"]),
                        str(row["label"])))
        except KeyError as exc:
            raise ManifestError(f"{where}: missing field {exc}") from exc
    return out


def load_inference_results(path: str | Path) -> dict[str, list[LabeledBox]]:
    """Inference JSONL -> {sample_id: final detections}."""
    results: dict[str, list[LabeledBox]] = {}
    for lineno, row in read_jsonl(path):
        where = f"{path}:{lineno}"
        sample_id = row.get("sample_id")
        if not sample_id:
            raise ManifestError(f"{where}: missing sample_id")
        if sample_id in results:
            raise ManifestError(f"{where}: duplicate sample_id {sample_id!r}")
        dets = []
        for i, entry in enumerate(row.get("detections", [])):
            try:
                c = entry["bbox"]
                dets.append(LabeledBox(
                    BBox(float(c[0]), float(c[1]), float(c[2]), float(c[3])),
                    str(entry["label"])))
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ManifestError(f"{where}: bad detection {i}: {exc}") from exc
        results[sample_id] = dets
    return results


def load_vocabulary(path: str | Path | None) -> AnomalyVocabulary:
    """JSON file {"labels": [...], "state_driven": [...]}; None -> default."""
    if path is None:
        return AnomalyVocabulary.default()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return AnomalyVocabulary(
            labels=tuple(str(x) for x in raw["labels"]),
            state_driven=frozenset(str(x) for x in raw.get("state_driven", ())),
        )
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad vocabulary file {path}: {exc}") from exc
