"""Generating difference-detection training pairs by cut-paste injection.

Real anomaly imagery is scarce, so training pairs are synthesized: paste
masked objects into a destination image (the target), perturb the pristine
destination (the reference), and prompt with the injected classes plus a few
dummies that are absent from the pair.

Run:  python demos/02_synthetic_anomalies.py
"""

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from patroldiff.core import RasterImage
from patroldiff.synth import (
    MaskedObject,
    PerturbationConfig,
    PromptStyle,
    generate_synth_dataset,
)

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

rng = np.random.default_rng(11)


def texture(h, w, seed, smooth=4.0):
    r = np.random.default_rng(seed)
    t = gaussian_filter(r.uniform(0, 255, (h, w, 3)), (smooth, smooth, 0))
    t = (t - t.min()) / (t.max() - t.min()) * 255
    return RasterImage(t.astype(np.uint8))


def blob_object(size, color, label):
    """A roughly elliptical colored blob with its binary mask."""
    img = np.zeros((size, size, 3), np.uint8)
    img[:] = color
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    mask = ((xx - c) ** 2 / (0.45 * size) ** 2
            + (yy - c) ** 2 / (0.35 * size) ** 2) <= 1.0
    return MaskedObject(RasterImage(img), mask, label)


destinations = [texture(220, 300, seed=s) for s in (1, 2)]
objects = [
    blob_object(48, (200, 40, 40), "traffic cone"),
    blob_object(40, (40, 40, 210), "garbage bag"),
    blob_object(36, (230, 220, 60), "helmet"),
    blob_object(30, (30, 200, 80), "plastic bottle"),
]

records = list(generate_synth_dataset(
    destinations, objects,
    cfg=PerturbationConfig(seed=0),     # mild affine jitter on the reference
    style=PromptStyle.specific(),
    n=4, seed=99,
))

for rec in records:
    rec.composite.save(OUT / f"{rec.sample_id}.png")
    print(f"--- {rec.sample_id}")
    print(f"  prompt: {rec.prompt}")
    for lb in rec.injected:
        print(f"  injected {lb.label:15s} box {[round(v, 1) for v in lb.bbox.as_list()]}")
    dummies = set(rec.prompt_classes) - {lb.label for lb in rec.injected}
    print(f"  dummy classes (absent from the pair): {sorted(dummies)}")

print(f"\nwrote {len(records)} composites to {OUT}/")
print("left half = target with pasted objects; right half = perturbed reference")
