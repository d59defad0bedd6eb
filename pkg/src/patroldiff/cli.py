"""Command-line surface: pair, synth, infer, eval, export-finetune, mock-serve, report.

Configuration comes from an optional TOML file with per-flag overrides
(flags win). All randomness flows from the run seed through documented
per-stage derivations, so any command rerun with the same inputs and seed
produces byte-identical primary outputs.

Exit codes: 0 success, 1 usage, 2 data error, 3 endpoint failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import align, evaluation, manifests, synth, twopass
from .client import ModelClient, MockOracleServer, OracleNoise
from .core import RasterImage, SampleRecord
from .errors import (
    ExhaustedRetries,
    IdMismatch,
    InsufficientFeatures,
    ManifestError,
    PatrolDiffError,
    ProtocolError,
    RequestTimeout,
)
from .seeding import stable_seed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ENDPOINT = 3

TOKEN_ENV_VAR = "PATROLDIFF_TOKEN"
_CONSECUTIVE_FAILURE_LIMIT = 10


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse contract
        raise _UsageError(message)


def _load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ManifestError(f"bad config file {path}: {exc}") from exc


def _cfg(args_value, toml: dict, key: str, default):
    """Flag beats config file beats built-in default."""
    if args_value is not None:
        return args_value
    return toml.get(key, default)


def _ransac_config(toml: dict, seed: int) -> align.RansacConfig:
    section = toml.get("ransac", {})
    return align.RansacConfig(
        max_iterations=int(section.get("max_iterations", 2000)),
        inlier_threshold=float(section.get("inlier_threshold", 3.0)),
        min_inliers=int(section.get("min_inliers", 12)),
        seed=seed,
    )


def _perturbation_config(toml: dict, seed: int) -> synth.PerturbationConfig:
    section = toml.get("perturbation", {})
    def pair(key, default):
        v = section.get(key, default)
        return (float(v[0]), float(v[1]))
    return synth.PerturbationConfig(
        rotation_deg=pair("rotation_deg", (-3.0, 3.0)),
        translation_frac=pair("translation_frac", (-0.02, 0.02)),
        scale=pair("scale", (0.97, 1.03)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# pair
# ---------------------------------------------------------------------------

def cmd_pair(args) -> int:
    toml = _load_toml(args.config)
    seed = int(_cfg(args.seed, toml, "seed", 0))
    k = int(_cfg(args.k, toml, "k_candidates", 5))
    concurrency = int(_cfg(args.concurrency, toml, "concurrency", 4))
    out_dir = Path(args.out)
    composites_dir = out_dir / "composites"
    composites_dir.mkdir(parents=True, exist_ok=True)

    records = manifests.load_sample_manifest(args.samples)
    pool = manifests.load_reference_pool(args.refs)
    tel_pool = [(ref_id, tel) for ref_id, _, tel in pool]
    ref_paths = {ref_id: path for ref_id, path, _ in pool}
    matches_dir = Path(args.matches) if args.matches else None

    def imported_matches(sample_id: str) -> list[tuple[str, align.MatchResult]]:
        """External correspondence files named <sample_id>@<ref_id>.jsonl."""
        if matches_dir is None:
            return []
        out = []
        for path in sorted(matches_dir.glob(f"{sample_id}@*.jsonl")):
            ref_id = path.stem.split("@", 1)[1]
            if ref_id not in ref_paths:
                raise ManifestError(f"{path}: unknown ref_id {ref_id!r}")
            out.append((ref_id, align.MatchResult.from_correspondences(
                align.load_correspondences(path))))
        return out

    def build(rec: SampleRecord) -> SampleRecord:
        target = RasterImage.load(rec.target_image)
        matched: list[tuple[str, align.MatchResult | None]] = imported_matches(
            rec.sample_id)
        if not matched:
            candidate_ids = align.retrieve_candidates(rec.telemetry, tel_pool, k)
            for ref_id in candidate_ids:
                try:
                    matched.append(
                        (ref_id, align.match_features(
                            RasterImage.load(ref_paths[ref_id]), target)))
                except InsufficientFeatures:
                    matched.append((ref_id, None))
        chosen = align.select_reference(matched)
        result = dict(matched)[chosen]
        cfg = _ransac_config(toml, stable_seed(seed, "ransac", rec.sample_id))
        homography, _ = align.estimate_homography_ransac(
            result.correspondences, cfg)
        warped = align.warp_reference(RasterImage.load(ref_paths[chosen]),
                                      homography, (target.width, target.height))
        composite = align.compose_pair(target, warped)
        composite_path = composites_dir / f"{rec.sample_id}.png"
        composite.save(composite_path)
        return replace(rec, composite=str(composite_path), homography=homography,
                       mean_distance=result.mean_distance, selected_ref=chosen)

    rows: list[dict] = []
    failures: list[dict] = []
    with ThreadPoolExecutor(max_workers=concurrency) as executor:
        futures = [executor.submit(build, rec) for rec in records]
        for rec, fut in zip(records, futures):
            try:
                rows.append(manifests.sample_row(fut.result(), base=out_dir))
            except (PatrolDiffError, ValueError, OSError) as exc:
                logger.warning("sample %s failed: %s", rec.sample_id, exc)
                failures.append({"sample_id": rec.sample_id, "error": str(exc)})

    manifests.write_jsonl(out_dir / "pairs.jsonl", rows)
    if failures:
        manifests.write_jsonl(out_dir / "failures.jsonl", failures)
    print(f"paired {len(rows)} / {len(records)} samples -> {out_dir / 'pairs.jsonl'}")
    if records and len(failures) > len(records) / 2:
        logger.error("more than half of all samples failed pairing")
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _load_destinations(spec: str) -> list[RasterImage]:
    path = Path(spec)
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        return [RasterImage.load(p) for p in files]
    return [RasterImage.load(p) for _, row in manifests.read_jsonl(path)
            for p in [manifests._resolve(path.parent, row["image"])]]


def cmd_synth(args) -> int:
    toml = _load_toml(args.config)
    seed = _cfg(args.seed, toml, "seed", None)
    if seed is None:
        raise _UsageError("synth requires --seed (or seed in the config file)")
    objects_spec = manifests.load_object_manifest(args.objects)
    if not objects_spec:
        raise _UsageError(f"object manifest {args.objects} is empty")
    destinations = _load_destinations(args.destinations)
    if not destinations:
        raise _UsageError(f"no destination images found at {args.destinations}")
    objects = [synth.MaskedObject.from_files(img, mask, label)
               for img, mask, label in objects_spec]

    style = synth.PromptStyle.abstract() if args.style == "abstract" \
        else synth.PromptStyle.specific()
    cfg = _perturbation_config(toml, seed=0)

    out_dir = Path(args.out)
    images_dir = out_dir / "images"
    composites_dir = out_dir / "composites"
    images_dir.mkdir(parents=True, exist_ok=True)
    composites_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for rec in synth.generate_synth_dataset(
            destinations, objects, cfg, style, n=args.n, seed=int(seed)):
        target_path = images_dir / f"{rec.sample_id}_target.png"
        reference_path = images_dir / f"{rec.sample_id}_reference.png"
        composite_path = composites_dir / f"{rec.sample_id}.png"
        rec.target.save(target_path)
        rec.reference.save(reference_path)
        rec.composite.save(composite_path)
        rows.append({
            "sample_id": rec.sample_id,
            "target_image": str(target_path.relative_to(out_dir)),
            "reference_image": str(reference_path.relative_to(out_dir)),
            "composite": str(composite_path.relative_to(out_dir)),
            "injected": [{"bbox": lb.bbox.as_list(), "label": lb.label}
                         for lb in rec.injected],
            "prompt": rec.prompt,
            "prompt_classes": list(rec.prompt_classes),
        })
    manifests.write_jsonl(out_dir / "synth.jsonl", rows)
    print(f"generated {len(rows)} pairs -> {out_dir / 'synth.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    toml = _load_toml(args.config)
    endpoint = _cfg(args.endpoint, toml, "endpoint", None)
    if not endpoint:
        raise _UsageError("infer requires --endpoint (or endpoint in the config file)")
    concurrency = int(_cfg(args.concurrency, toml, "concurrency", 4))
    margin = float(_cfg(args.margin, toml, "crop_margin", twopass.DEFAULT_CROP_MARGIN))
    vocab = manifests.load_vocabulary(_cfg(args.vocab, toml, "vocabulary", None))
    token = os.environ.get(TOKEN_ENV_VAR) or toml.get("auth_token")

    records = manifests.load_sample_manifest(args.pairs)
    missing = [r.sample_id for r in records if r.composite is None]
    if missing:
        raise ManifestError(f"samples without composites: {missing[:5]}"
                            f"{'...' if len(missing) > 5 else ''}")

    client = ModelClient(
        endpoint,
        auth_token=token,
        timeout_s=float(_cfg(args.timeout, toml, "timeout_s", 120.0)),
        max_retries=int(_cfg(args.retries, toml, "max_retries", 3)),
        max_concurrency=concurrency,
    )

    def infer(rec: SampleRecord) -> dict:
        composite = RasterImage.load(rec.composite)
        target = RasterImage.load(rec.target_image)
        pass1 = twopass.run_pass1(composite, vocab, client, rec.sample_id,
                                  target_width=target.width)
        if args.single_pass:
            final = twopass.single_pass_result(pass1)
        else:
            final = twopass.run_pass2(target, pass1, vocab, client,
                                      rec.sample_id, margin_frac=margin)
        return twopass.inference_row(rec.sample_id, pass1, final)

    rows: list[dict] = []
    failures: list[dict] = []
    consecutive = 0
    endpoint_failures = 0
    aborted = False
    with ThreadPoolExecutor(max_workers=concurrency) as executor:
        futures = [executor.submit(infer, rec) for rec in records]
        for rec, fut in zip(records, futures):
            if aborted:
                fut.cancel()
                continue
            try:
                rows.append(fut.result())
                consecutive = 0
            except (RequestTimeout, ExhaustedRetries, ProtocolError) as exc:
                logger.warning("endpoint failure on %s: %s", rec.sample_id, exc)
                failures.append({"sample_id": rec.sample_id, "error": str(exc)})
                endpoint_failures += 1
                consecutive += 1
                if consecutive >= _CONSECUTIVE_FAILURE_LIMIT:
                    logger.error("%d consecutive endpoint failures, aborting",
                                 consecutive)
                    aborted = True
            except (PatrolDiffError, ValueError, OSError) as exc:
                logger.warning("sample %s failed: %s", rec.sample_id, exc)
                failures.append({"sample_id": rec.sample_id, "error": str(exc)})
                consecutive = 0

    out_path = Path(args.out)
    manifests.write_jsonl(out_path, rows)
    if failures:
        manifests.write_jsonl(out_path.with_name(out_path.name + ".failures"),
                              failures)
    print(f"inferred {len(rows)} / {len(records)} samples -> {out_path}")
    if aborted or (records and not rows and endpoint_failures):
        return EXIT_ENDPOINT
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    toml = _load_toml(args.config)
    vocab = manifests.load_vocabulary(_cfg(args.vocab, toml, "vocabulary", None))
    records = manifests.load_sample_manifest(args.pairs)
    predictions = manifests.load_inference_results(args.inference)

    manifest_ids = {r.sample_id for r in records}
    inferred_ids = set(predictions)
    orphans = sorted(manifest_ids ^ inferred_ids)
    if orphans:
        raise IdMismatch(f"{len(orphans)} orphan sample ids: {orphans[:10]}"
                         f"{'...' if len(orphans) > 10 else ''}")

    thresholds = args.min_size if args.min_size else [0.0]
    reports = evaluation.evaluate_run(
        records, predictions, vocab,
        exclude_state_driven=args.exclude_state_driven,
        size_thresholds=thresholds,
        size_mode=args.size_mode,
        iou_threshold=args.iou,
    )
    evaluation.emit_report(reports, args.out)
    for r in reports:
        macro = "n/a" if r.macro_f1 is None else f"{r.macro_f1:.4f}"
        print(f"{r.condition:10s} state_excluded={r.state_driven_excluded} "
              f"min_size={r.min_size_px:g}: macro_f1={macro} "
              f"({r.n_retained} / {r.n_total})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-finetune / mock-serve / report
# ---------------------------------------------------------------------------

def cmd_export_finetune(args) -> int:
    toml = _load_toml(args.config)
    vocab = manifests.load_vocabulary(_cfg(args.vocab, toml, "vocabulary", None))
    margin = float(_cfg(args.margin, toml, "crop_margin", twopass.DEFAULT_CROP_MARGIN))
    records = manifests.load_sample_manifest(args.pairs)
    out_dir = Path(args.out)
    pass1, pass2 = twopass.export_finetune_records(records, vocab, out_dir,
                                                   margin_frac=margin)
    manifests.write_jsonl(out_dir / "pass1.jsonl", pass1)
    manifests.write_jsonl(out_dir / "pass2.jsonl", pass2)
    print(f"exported {len(pass1)} pass-1 and {len(pass2)} pass-2 records -> {out_dir}")
    return EXIT_OK


def cmd_mock_serve(args) -> int:
    toml = _load_toml(args.config)
    seed = _cfg(args.seed, toml, "seed", None)
    if seed is None:
        raise _UsageError("mock-serve requires --seed (or seed in the config file)")
    records = manifests.load_sample_manifest(args.pairs)
    vocab = manifests.load_vocabulary(_cfg(args.vocab, toml, "vocabulary", None))
    noise = OracleNoise(p_drop=args.p_drop, jitter_sigma=args.jitter,
                        p_label_flip=args.p_flip, seed=int(seed))
    try:
        server = MockOracleServer(records, noise, vocab=vocab, port=args.port)
    except (OverflowError, ValueError) as exc:
        raise _UsageError(f"invalid port {args.port}: {exc}") from exc
    except OSError as exc:
        logger.error("cannot bind port %s: %s", args.port, exc)
        return EXIT_ENDPOINT
    print(f"mock oracle serving {len(records)} samples on {server.endpoint}",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        payload = json.loads(Path(args.report).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"bad report file {args.report}: {exc}") from exc
    reports = []
    for entry in payload:
        reports.append(evaluation.ConditionReport(
            condition=entry["condition"],
            state_driven_excluded=entry["filters"]["state_driven_excluded"],
            min_size_px=entry["filters"]["min_size_px"],
            n_retained=entry["n_retained"],
            n_total=entry["n_total"],
            macro_f1=entry["macro_f1"],
            samples=tuple(evaluation.SampleEvaluation(
                sample_id=s["sample_id"], tp=s["tp"], fp=s["fp"], fn=s["fn"],
                f1=s["f1"], matches=tuple(tuple(m) for m in s["matches"]))
                for s in entry["samples"]),
            quartiles=tuple(entry["quartiles"]) if entry.get("quartiles") else None,
            quartile_size_caps=tuple(entry["quartile_size_caps"])
            if entry.get("quartile_size_caps") else None,
        ))
    written = evaluation.emit_report(reports, args.out)
    print(f"re-rendered {len(written)} report files -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="patroldiff",
                     description="Patrol-imagery change detection pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file; flags override it")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("pair", help="build aligned target|reference composites")
    common(p)
    p.add_argument("--samples", required=True, help="sample manifest JSONL")
    p.add_argument("--refs", required=True, help="reference pool JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=None, help="candidate references per sample")
    p.add_argument("--concurrency", type=int, default=None)
    p.add_argument("--matches", default=None,
                   help="directory of externally computed correspondence files "
                        "(<sample_id>@<ref_id>.jsonl), bypassing the built-in "
                        "matcher for samples that have them")
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("synth", help="generate cut-paste difference pairs")
    common(p)
    p.add_argument("--objects", required=True, help="object manifest JSONL")
    p.add_argument("--destinations", required=True,
                   help="directory of images, or JSONL of {'image': path}")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--style", choices=["specific", "abstract"], default="specific")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("infer", help="run two-pass inference over a pair manifest")
    common(p)
    p.add_argument("--pairs", required=True, help="pair manifest JSONL")
    p.add_argument("--out", required=True, help="output inference JSONL")
    p.add_argument("--endpoint", default=None)
    p.add_argument("--vocab", default=None, help="vocabulary JSON file")
    p.add_argument("--margin", type=float, default=None, help="pass-2 crop margin")
    p.add_argument("--concurrency", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--retries", type=int, default=None)
    p.add_argument("--single-pass", action="store_true",
                   help="skip pass 2 (ablation)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score inference output against ground truth")
    common(p)
    p.add_argument("--inference", required=True, help="inference JSONL")
    p.add_argument("--pairs", required=True, help="pair manifest JSONL")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--vocab", default=None)
    p.add_argument("--exclude-state-driven", action="store_true")
    p.add_argument("--min-size", type=float, action="append", default=None,
                   help="size threshold in px; repeatable")
    p.add_argument("--size-mode", choices=["any", "all"], default="any")
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-finetune", help="emit two-pass training records")
    common(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--margin", type=float, default=None)
    p.set_defaults(func=cmd_export_finetune)

    p = sub.add_parser("mock-serve", help="serve the deterministic mock oracle")
    common(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--vocab", default=None)
    p.add_argument("--p-drop", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--p-flip", type=float, default=0.0)
    p.set_defaults(func=cmd_mock_serve)

    p = sub.add_parser("report", help="re-render CSV/SVG from a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, IdMismatch) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RequestTimeout, ExhaustedRetries, ProtocolError) as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except PatrolDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
