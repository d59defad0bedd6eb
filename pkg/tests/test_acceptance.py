"""Acceptance gate: one test per criterion, each printing PASS/FAIL.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. Criteria with stated runtime budgets assert them.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from patroldiff import align, manifests
from patroldiff.cli import main
from patroldiff.client import MockOracleServer, OracleNoise
from patroldiff.core import (
    AnomalyVocabulary,
    BBox,
    LabeledBox,
    RasterImage,
    SampleRecord,
    iou,
)
from patroldiff.evaluation import (
    EvalCondition,
    SampleCounts,
    SampleScore,
    filter_samples,
    macro_f1,
    match_sample,
    quartile_agreement,
    sample_f1,
)
from patroldiff.synth import PromptStyle, build_prompt
from tests.conftest import make_texture
from tests.test_cli import build_synth_world, write_rows

VOCAB = AnomalyVocabulary.default()


def criterion(number: int, text: str, check) -> None:
    try:
        check()
    except BaseException:
        print(f"[criterion {number:02d}] FAIL  {text}")
        raise
    print(f"[criterion {number:02d}] PASS  {text}")


def brute_force_tp(preds, gts, cond) -> int:
    admissible = {(p, g) for p in range(len(preds)) for g in range(len(gts))
                  if iou(preds[p].bbox, gts[g].bbox) >= cond.iou_threshold
                  and (cond.variant == "bbox_only"
                       or preds[p].label == gts[g].label)}
    upper = min(len(preds), len(gts))
    for k in range(upper, 0, -1):
        for p_subset in itertools.permutations(range(len(preds)), k):
            for g_subset in itertools.combinations(range(len(gts)), k):
                if all((p, g) in admissible for p, g in zip(p_subset, g_subset)):
                    return k
    return 0


def test_criterion_01_metric_oracle_equivalence():
    def check():
        rng = np.random.default_rng(2024)
        labels = ["tool", "glove", "towel", "helmet"]

        def boxes(n):
            out = []
            for _ in range(n):
                x1, y1 = rng.uniform(0, 80, 2)
                w, h = rng.uniform(5, 40, 2)
                out.append(LabeledBox(BBox(x1, y1, x1 + w, y1 + h),
                                      str(rng.choice(labels))))
            return out

        start = time.monotonic()
        for _ in range(500):
            preds = boxes(int(rng.integers(0, 7)))
            gts = boxes(int(rng.integers(0, 7)))
            for variant in ("bbox_only", "bbox_label"):
                cond = EvalCondition(variant)
                counts, _ = match_sample(preds, gts, cond)
                assert counts.tp == brute_force_tp(preds, gts, cond)
        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"took {elapsed:.1f}s"

    criterion(1, "match_sample equals brute-force maximum matching "
                 "(500 random instances, both conditions, < 10 s)", check)


def test_criterion_02_f1_formula_checks():
    def check():
        assert sample_f1(SampleCounts(tp=1, fp=1, fn=1)).f1 == 0.5
        assert macro_f1([SampleScore(1.0), SampleScore(0.5)]).m == 0.75

    criterion(2, "per-sample F1 and macro-average formulas exact", check)


def test_criterion_03_homography_recovery():
    def check():
        start = time.monotonic()
        successes = 0
        for trial in range(100):
            rng = np.random.default_rng(31_000 + trial)
            ang = rng.uniform(-0.25, 0.25)
            s = rng.uniform(0.85, 1.15)
            m = np.array([
                [s * math.cos(ang), -s * math.sin(ang), rng.uniform(-40, 40)],
                [s * math.sin(ang), s * math.cos(ang), rng.uniform(-40, 40)],
                [rng.uniform(-1e-4, 1e-4), rng.uniform(-1e-4, 1e-4), 1.0]])
            from patroldiff.core import Homography
            h_true = Homography(m)
            pts = rng.uniform([50, 50], [950, 700], size=(50, 2))
            tgt = h_true.apply_many(pts) + rng.normal(0, 0.5, (50, 2))
            out_idx = rng.choice(50, size=15, replace=False)
            tgt[out_idx] = rng.uniform([0, 0], [1000, 750], size=(15, 2))
            corrs = [align.Correspondence((float(p[0]), float(p[1])),
                                          (float(t[0]), float(t[1])))
                     for p, t in zip(pts, tgt)]
            try:
                h_est, inliers = align.estimate_homography_ransac(
                    corrs, align.RansacConfig(seed=trial))
            except align.ConsensusFailure:
                continue
            err = align.symmetric_transfer_error(h_est, pts, tgt)
            rms = math.sqrt(float(np.mean(err[sorted(inliers)] ** 2)))
            if rms <= 1.0:
                successes += 1
        elapsed = time.monotonic() - start
        assert successes >= 95, f"only {successes}/100 trials under 1.0 px RMS"
        assert elapsed < 30.0, f"took {elapsed:.1f}s"

    criterion(3, "RANSAC + refit reaches <= 1.0 px inlier RMS in >= 95/100 "
                 "noisy-outlier trials (< 30 s)", check)


def test_criterion_04_warp_fidelity():
    def check():
        rng = np.random.default_rng(9)
        for trial in range(10):
            img = make_texture(160, 200, seed=700 + trial)
            ang = rng.uniform(-0.04, 0.04)
            s = rng.uniform(0.98, 1.02)
            from patroldiff.core import Homography
            h = Homography(np.array([
                [s * math.cos(ang), -s * math.sin(ang), rng.uniform(-3, 3)],
                [s * math.sin(ang), s * math.cos(ang), rng.uniform(-3, 3)],
                [rng.uniform(-2e-5, 2e-5), rng.uniform(-2e-5, 2e-5), 1.0]]))
            fwd = align.warp_reference(img, h, (200, 160))
            back = align.warp_reference(fwd, h.inverse(), (200, 160))
            a = img.pixels[10:-10, 10:-10].astype(float)
            b = back.pixels[10:-10, 10:-10].astype(float)
            psnr = 10 * math.log10(255.0 ** 2 / float(np.mean((a - b) ** 2)))
            assert psnr >= 30.0, f"trial {trial}: PSNR {psnr:.1f} dB"

    criterion(4, "warp round trip keeps interior PSNR >= 30 dB on 10 textures",
              check)


def test_criterion_05_closed_loop_perfect_oracle(tmp_path):
    def check():
        start = time.monotonic()
        objects, dests = build_synth_world(tmp_path)
        synth_dir = tmp_path / "synth"
        assert main(["synth", "--objects", str(objects), "--destinations",
                     str(dests), "--out", str(synth_dir), "--n", "100",
                     "--seed", "404"]) == 0
        manifest = synth_dir / "synth.jsonl"
        records = manifests.load_sample_manifest(manifest)
        assert len(records) == 100
        inference = tmp_path / "inference.jsonl"
        with MockOracleServer(records, OracleNoise(seed=5)) as server:
            assert main(["infer", "--pairs", str(manifest), "--out",
                         str(inference), "--endpoint", server.endpoint]) == 0
        report_dir = tmp_path / "report"
        assert main(["eval", "--inference", str(inference), "--pairs",
                     str(manifest), "--out", str(report_dir)]) == 0
        payload = json.loads((report_dir / "report.json").read_text())
        for entry in payload:
            assert entry["macro_f1"] == 1.0, entry["condition"]
        elapsed = time.monotonic() - start
        assert elapsed < 120.0, f"took {elapsed:.1f}s"

    criterion(5, "synth 100 pairs -> mock infer -> eval gives macro-F1 "
                 "exactly 1.0 under both conditions (< 2 min)", check)


def _noise_manifest(tmp_path: Path, n: int) -> Path:
    """n single-box samples sharing one tiny composite/target pair."""
    target = make_texture(64, 96, seed=1)
    composite = RasterImage(np.hstack([target.pixels, target.pixels]))
    target_path = tmp_path / "shared_target.png"
    composite_path = tmp_path / "shared_composite.png"
    target.save(target_path)
    composite.save(composite_path)
    rng = np.random.default_rng(77)
    rows = []
    for i in range(n):
        x1 = float(rng.uniform(0, 60))
        y1 = float(rng.uniform(0, 30))
        w = float(rng.uniform(12, 30))
        h = float(rng.uniform(12, 30))
        rows.append({
            "sample_id": f"noise-{i:05d}",
            "target_image": target_path.name,
            "composite": composite_path.name,
            "ground_truth": [{"bbox": [x1, y1, min(x1 + w, 95.0),
                                       min(y1 + h, 63.0)],
                              "label": str(rng.choice(VOCAB.labels))}],
        })
    return write_rows(tmp_path / "noise_manifest.jsonl", rows)


def test_criterion_06_closed_loop_known_noise(tmp_path):
    def check():
        manifest = _noise_manifest(tmp_path, 1000)
        records = manifests.load_sample_manifest(manifest)
        inference = tmp_path / "inference.jsonl"
        with MockOracleServer(records, OracleNoise(p_drop=0.3, seed=13)) as server:
            assert main(["infer", "--pairs", str(manifest), "--out",
                         str(inference), "--endpoint", server.endpoint]) == 0
        report_dir = tmp_path / "report"
        assert main(["eval", "--inference", str(inference), "--pairs",
                     str(manifest), "--out", str(report_dir)]) == 0
        payload = json.loads((report_dir / "report.json").read_text())
        by_cond = {e["condition"]: e["macro_f1"] for e in payload}
        # Binomial: each sample scores 1 w.p. 0.7 else 0; 3 sigma ~ 0.043.
        assert abs(by_cond["bbox_only"] - 0.70) <= 0.05, by_cond
        assert abs(by_cond["bbox_label"] - 0.70) <= 0.05, by_cond

    criterion(6, "mock with p_drop=0.3 over 1000 single-box samples scores "
                 "macro-F1 within 0.70 +/- 0.05", check)


def test_criterion_07_condition_ordering(tmp_path):
    def check():
        manifest = _noise_manifest(tmp_path, 150)
        records = manifests.load_sample_manifest(manifest)
        noises = [OracleNoise(p_label_flip=0.4, seed=3),
                  OracleNoise(p_drop=0.2, jitter_sigma=1.5, p_label_flip=0.7,
                              seed=4)]
        for idx, noise in enumerate(noises):
            inference = tmp_path / f"inference-{idx}.jsonl"
            with MockOracleServer(records, noise) as server:
                assert main(["infer", "--pairs", str(manifest), "--out",
                             str(inference), "--endpoint",
                             server.endpoint]) == 0
            report_dir = tmp_path / f"report-{idx}"
            assert main(["eval", "--inference", str(inference), "--pairs",
                         str(manifest), "--out", str(report_dir)]) == 0
            payload = json.loads((report_dir / "report.json").read_text())
            by_cond = {e["condition"]: e["macro_f1"] for e in payload}
            assert by_cond["bbox_label"] <= by_cond["bbox_only"], by_cond

    criterion(7, "with label flips active, macro(bbox_label) <= "
                 "macro(bbox_only) on every run", check)


def test_criterion_08_filter_bookkeeping():
    def check():
        records = []
        for i in range(299):
            label = "open door" if i % 2 == 0 else "water leakage"
            records.append(SampleRecord(
                sample_id=f"state-{i}", target_image="t.png",
                ground_truth=(LabeledBox(BBox(0, 0, 40, 40), label),
                              LabeledBox(BBox(50, 50, 90, 90), "tool"))))
        for i in range(901):
            records.append(SampleRecord(
                sample_id=f"object-{i}", target_image="t.png",
                ground_truth=(LabeledBox(BBox(0, 0, 40, 40), "tool"),)))
        kept = filter_samples(records, exclude_state_driven=True,
                              size_threshold_px=0.0, vocab=VOCAB)
        assert (len(kept), len(records)) == (901, 1200)

    criterion(8, "state-driven exclusion on a 1200-sample manifest retains "
                 "901 / 1200 at threshold 0", check)


def test_criterion_09_prompt_fidelity():
    def check():
        expected = ("Find the bounding boxes of objects that are present in "
                    "the left image but missing in the right image: "
                    "[apple, book, camera]")
        # Seed 1 picks the first template and an identity shuffle.
        text, classes = build_prompt(PromptStyle.specific(),
                                     ["apple", "book", "camera"], [], 0, seed=1)
        assert text == expected
        assert classes == ["apple", "book", "camera"]

    criterion(9, "build_prompt reproduces the canonical difference prompt "
                 "byte-for-byte", check)


def test_criterion_10_quartile_accounting():
    def check():
        rng = np.random.default_rng(6)
        pool = []
        for size in rng.uniform(4, 400, 8000):
            pool.append((BBox(0, 0, float(size), float(size)), True))
        rates = quartile_agreement(pool)
        assert sum(rates) == 1.0
        assert all(r == 0.25 for r in rates)

    criterion(10, "perfect-oracle quartile agreement rates sum to exactly "
                  "1.0 over an 8000-box pool", check)


def test_criterion_11_determinism_sweep(tmp_path):
    def check():
        from tests.test_cli import build_pair_world
        samples, refs = build_pair_world(tmp_path / "world")

        def tree_bytes(root: Path) -> dict:
            return {str(p.relative_to(root)): p.read_bytes()
                    for p in sorted(root.rglob("*")) if p.is_file()}

        # pair
        pair_outs = []
        for name in ("p1", "p2"):
            out = tmp_path / name
            assert main(["pair", "--samples", str(samples), "--refs",
                         str(refs), "--out", str(out), "--seed", "3"]) == 0
            pair_outs.append(tree_bytes(out))
        assert pair_outs[0] == pair_outs[1]

        # synth
        objects, dests = build_synth_world(tmp_path / "sw")
        synth_outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert main(["synth", "--objects", str(objects), "--destinations",
                         str(dests), "--out", str(out), "--n", "12",
                         "--seed", "21"]) == 0
            synth_outs.append(tree_bytes(out))
        assert synth_outs[0] == synth_outs[1]

        # infer + eval + export-finetune on the synth output
        manifest = tmp_path / "s1" / "synth.jsonl"
        records = manifests.load_sample_manifest(manifest)
        infer_blobs, report_trees, export_trees = [], [], []
        for name in ("i1", "i2"):
            inference = tmp_path / f"{name}.jsonl"
            with MockOracleServer(records,
                                  OracleNoise(p_drop=0.2, jitter_sigma=1.0,
                                              p_label_flip=0.2,
                                              seed=8)) as server:
                assert main(["infer", "--pairs", str(manifest), "--out",
                             str(inference), "--endpoint",
                             server.endpoint]) == 0
            infer_blobs.append(inference.read_bytes())
            report_dir = tmp_path / f"rep-{name}"
            assert main(["eval", "--inference", str(inference), "--pairs",
                         str(manifest), "--out", str(report_dir),
                         "--min-size", "0", "--min-size", "20"]) == 0
            report_trees.append(tree_bytes(report_dir))
            export_dir = tmp_path / f"ft-{name}"
            assert main(["export-finetune", "--pairs", str(manifest),
                         "--out", str(export_dir)]) == 0
            tree = tree_bytes(export_dir)
            # pass2.jsonl embeds absolute crop paths; compare content-wise.
            tree["pass2.jsonl"] = b"\n".join(
                json.dumps({k: (Path(v).name if k == "image" else v)
                            for k, v in json.loads(line).items()}).encode()
                for line in tree["pass2.jsonl"].decode().splitlines())
            export_trees.append(tree)
        assert infer_blobs[0] == infer_blobs[1]
        assert report_trees[0] == report_trees[1]
        assert export_trees[0] == export_trees[1]

    criterion(11, "pair/synth/infer/eval/export rerun with identical seeds "
                  "produce byte-identical outputs", check)
