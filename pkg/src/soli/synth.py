"""Procedural stand-in corpus: two coloured shapes per image, five template captions."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .dataset import CaptionRecord, write_manifest
from .errors import ConfigError
from .imageops import write_png
from .rng import GENERATOR_NAME, make_rng

MIN_SIZE = 16

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 210, 40),
}
SHAPES = ("circle", "square", "triangle")
RELATIONS = {"above": "below", "below": "above", "left of": "right of", "right of": "left of"}


def _mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    # upward triangle with apex at the top
    t = (dy + r) / (2 * r)
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= t * r)


def _positions(relation: str, size: int, rng: np.random.Generator):
    lo, hi = 0.27 * size, 0.73 * size
    jitter = lambda: float(rng.uniform(-0.06, 0.06)) * size
    mid = size / 2
    if relation == "above":
        return (lo + jitter(), mid + jitter()), (hi + jitter(), mid + jitter())
    if relation == "below":
        return (hi + jitter(), mid + jitter()), (lo + jitter(), mid + jitter())
    if relation == "left of":
        return (mid + jitter(), lo + jitter()), (mid + jitter(), hi + jitter())
    return (mid + jitter(), hi + jitter()), (mid + jitter(), lo + jitter())


def captions_for(c1, s1, rel, c2, s2) -> list[str]:
    inv = RELATIONS[rel]
    return [
        f"a {c1} {s1} {rel} a {c2} {s2}",
        f"a {c1} {s1} is {rel} a {c2} {s2}",
        f"there is a {c1} {s1} {rel} a {c2} {s2}",
        f"a {c2} {s2} {inv} a {c1} {s1}",
        f"a {c1} {s1} and a {c2} {s2}",
    ]


def render_scene(size: int, rng: np.random.Generator):
    colors = list(COLORS)
    c1, c2 = (colors[i] for i in rng.choice(len(colors), 2, replace=False))
    s1, s2 = SHAPES[int(rng.integers(0, 3))], SHAPES[int(rng.integers(0, 3))]
    rel = list(RELATIONS)[int(rng.integers(0, 4))]
    bg = 12 + rng.integers(0, 21, size=3)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = bg
    (y1, x1), (y2, x2) = _positions(rel, size, rng)
    r = size * float(rng.uniform(0.15, 0.19))
    for shape, color, cy, cx in ((s1, c1, y1, x1), (s2, c2, y2, x2)):
        img[_mask(shape, size, cy, cx, r)] = COLORS[color]
    img += rng.normal(0, 6, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), captions_for(c1, s1, rel, c2, s2)


def split_for(i: int) -> str:
    return {6: "val", 7: "test"}.get(i % 8, "train")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def generate_corpus(out_dir, count: int = 64, size: int = 64, seed: int = 0) -> Path:
    """Write ``count`` images, ``manifest.jsonl`` and ``corpus.json`` under ``out_dir``."""
    if size < MIN_SIZE:
        raise ConfigError(f"image size {size} is below the minimum of {MIN_SIZE}")
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed, "synth")
    records = []
    for i in range(count):
        img, caps = render_scene(size, rng)
        iid = f"synth_{i:05d}"
        f = out_dir / "images" / f"{iid}.png"
        write_png(img, f)
        records.append(CaptionRecord(iid, f, split_for(i), tuple(caps)))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(records, manifest)
    cfg = {"count": count, "size": size, "seed": seed}
    meta = {**cfg, "generator": GENERATOR_NAME, "config_hash": config_hash(cfg)}
    (out_dir / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return manifest
