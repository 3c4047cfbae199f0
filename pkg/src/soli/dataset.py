"""Caption corpora: manifests, dimension statistics, augmented variants, Siamese pairs."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import imageops
from .errors import ImageError, ManifestError, ProfileTooAggressiveError, SamplingError
from .rng import bernoulli

SPLITS = ("train", "val", "test")
_KEYS = ("image_id", "file", "split", "captions")


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    file: Path
    split: str
    captions: tuple[str, ...]


def load_manifest(path) -> list[CaptionRecord]:
    """Read a JSON Lines manifest; relative ``file`` entries resolve against its directory."""
    path = Path(path)
    base = path.parent
    records, seen = [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})", [lineno]) from exc
            missing = [k for k in _KEYS if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing key(s) {', '.join(missing)}", [lineno])
            iid = str(obj["image_id"])
            if iid in seen:
                raise ManifestError(
                    f"{path}: duplicate image_id {iid!r} on lines {seen[iid]} and {lineno}",
                    [seen[iid], lineno],
                )
            if obj["split"] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {obj['split']!r}", [lineno])
            caps = obj["captions"]
            if not isinstance(caps, list) or not caps or not all(isinstance(c, str) and c.strip() for c in caps):
                raise ManifestError(f"{path}:{lineno}: captions must be a non-empty list of strings", [lineno])
            seen[iid] = lineno
            records.append(CaptionRecord(iid, (base / obj["file"]), obj["split"], tuple(caps)))
    return records


def write_manifest(records, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            rel = os.path.relpath(r.file, path.parent)
            f.write(json.dumps({"image_id": r.image_id, "file": rel, "split": r.split,
                                "captions": list(r.captions)}, sort_keys=True) + "\n")


def split_records(records, split: str) -> list[CaptionRecord]:
    return [r for r in records if r.split == split]


@dataclass(frozen=True)
class AxisStats:
    mean: float
    std_dev: float
    median: float
    min: float
    max: float


@dataclass(frozen=True)
class DimensionStats:
    height: AxisStats
    width: AxisStats
    channels: AxisStats
    count: int

    def to_dict(self) -> dict:
        return {"count": self.count,
                **{k: vars(getattr(self, k)) for k in ("height", "width", "channels")}}


def _axis(values) -> AxisStats:
    v = np.asarray(values, dtype=np.float64)
    return AxisStats(float(v.mean()), float(v.std()), float(np.median(v)), float(v.min()), float(v.max()))


def compute_stats(records) -> DimensionStats:
    """Population statistics (divide by N) of decoded image dimensions."""
    hs, ws, cs = [], [], []
    for r in records:
        try:
            with PILImage.open(r.file) as im:
                w, h = im.size
                c = len(im.getbands())
        except OSError as exc:
            raise ImageError(f"cannot read image {r.file}: {exc}") from exc
        hs.append(h)
        ws.append(w)
        cs.append(c)
    if not hs:
        raise ImageError("no images to summarise")
    return DimensionStats(_axis(hs), _axis(ws), _axis(cs), len(hs))


@dataclass
class AugmentedSet:
    """Every (image_id, profile) pair mapped to exactly one stored image."""

    records: dict[str, CaptionRecord]
    profiles: tuple[str, ...]
    paths: dict[tuple[str, str], Path]

    def variant_path(self, image_id: str, profile: str) -> Path:
        profile = imageops.canonical_profile(profile)
        if profile == "normal":
            return self.records[image_id].file
        try:
            return self.paths[(image_id, profile)]
        except KeyError:
            raise KeyError(f"no variant {profile} for image {image_id}") from None

    def has(self, image_id: str, profile: str) -> bool:
        profile = imageops.canonical_profile(profile)
        return profile == "normal" and image_id in self.records or (image_id, profile) in self.paths

    def image_ids(self, split: str | None = None) -> list[str]:
        return [i for i, r in self.records.items() if split is None or r.split == split]

    def restrict(self, split: str) -> "AugmentedSet":
        keep = {i: r for i, r in self.records.items() if r.split == split}
        return AugmentedSet(keep, self.profiles, {k: v for k, v in self.paths.items() if k[0] in keep})

    def select(self, profiles) -> "AugmentedSet":
        """The same images restricted to ``profiles`` (all must be present)."""
        profiles = tuple(dict.fromkeys(imageops.canonical_profile(p) for p in profiles))
        unknown = [p for p in profiles if p != "normal" and p not in self.profiles]
        if unknown:
            raise SamplingError(f"profile(s) {', '.join(unknown)} not in the augmented set")
        keep = {k: v for k, v in self.paths.items() if k[1] in profiles}
        return AugmentedSet(self.records, profiles, keep)

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for iid in self.records:
                for p in self.profiles:
                    if not self.has(iid, p):
                        continue
                    rel = os.path.relpath(self.variant_path(iid, p), path.parent)
                    f.write(json.dumps({"image_id": iid, "profile": p, "file": rel}, sort_keys=True) + "\n")


def load_variants(records, path) -> AugmentedSet:
    """Rebuild an :class:`AugmentedSet` from a variants manifest."""
    path = Path(path)
    recs = {r.image_id: r for r in records}
    profiles, paths = [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                iid, prof, rel = obj["image_id"], imageops.canonical_profile(obj["profile"]), obj["file"]
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing key {exc}", [lineno]) from None
            if iid not in recs:
                raise ManifestError(f"{path}:{lineno}: unknown image_id {iid!r}", [lineno])
            if prof not in profiles:
                profiles.append(prof)
            if prof != "normal":
                paths[(iid, prof)] = path.parent / rel
    return AugmentedSet(recs, tuple(profiles), paths)


@dataclass
class AugmentReport:
    written: int = 0
    unchanged: int = 0
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _variant_file(out_dir: Path, image_id: str, profile: str) -> Path:
    return out_dir / profile / f"{image_id}.png"


def _augment_one(record: CaptionRecord, profiles, out_dir: Path):
    done, errors, written, unchanged = [], [], 0, 0
    try:
        src = imageops.read_image(record.file)
    except ImageError as exc:
        return done, [{"image_id": record.image_id, "profile": "*", "error": str(exc)}], 0, 0
    for p in profiles:
        if p == "normal":
            continue
        try:
            data = imageops.encode_png(imageops.apply_profile(src, p))
        except (ProfileTooAggressiveError, ImageError) as exc:
            errors.append({"image_id": record.image_id, "profile": p, "error": str(exc)})
            continue
        target = _variant_file(out_dir, record.image_id, p)
        if target.exists() and target.read_bytes() == data:
            unchanged += 1
        else:
            target.write_bytes(data)
            written += 1
        done.append((p, target))
    return done, errors, written, unchanged


def generate_augmented_set(records, profiles, out_dir, threads: int = 1) -> tuple[AugmentedSet, AugmentReport]:
    """Apply every profile to every record and write ``variants.jsonl``.

    Re-running over an existing directory rewrites nothing whose bytes already
    match. Per-image failures are collected in the report; the rest proceeds.
    """
    out_dir = Path(out_dir)
    profiles = tuple(dict.fromkeys(imageops.canonical_profile(p) for p in profiles))
    for p in profiles:
        if p != "normal":
            (out_dir / p).mkdir(parents=True, exist_ok=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda r: _augment_one(r, profiles, out_dir), records))

    report = AugmentReport()
    paths = {}
    for rec, (done, errors, written, unchanged) in zip(records, results):
        for p, target in done:
            paths[(rec.image_id, p)] = target
        report.errors.extend(errors)
        report.written += written
        report.unchanged += unchanged
    aset = AugmentedSet({r.image_id: r for r in records}, profiles, paths)
    aset.write(out_dir / "variants.jsonl")
    return aset, report


@dataclass(frozen=True)
class SiamesePair:
    left: tuple[str, str]
    right: tuple[str, str]
    similarity: int
    captions_left: tuple[str, ...]
    captions_right: tuple[str, ...]


def sample_pair(aset: AugmentedSet, rng: np.random.Generator, positive_prob: float = 0.5,
                image_ids=None) -> SiamesePair:
    """Draw one labelled pair; the left side is always an original image.

    Positive: the same image under a uniformly drawn profile (``normal``
    included). Negative: a uniformly drawn different image under a uniformly
    drawn profile. Draws happen in a fixed order (coin, left, [other], profile)
    so a given generator state always yields the same pair.
    """
    if not 0.0 <= positive_prob <= 1.0:
        raise SamplingError(f"positive_prob must be in [0, 1], got {positive_prob}")
    ids = list(image_ids) if image_ids is not None else aset.image_ids()
    if not ids:
        raise SamplingError("no images to sample from")
    positive = bernoulli(rng, positive_prob)
    li = int(rng.integers(0, len(ids)))
    left = ids[li]
    if positive:
        right = left
    else:
        if len(ids) < 2:
            raise SamplingError("a negative pair needs at least two distinct images")
        k = int(rng.integers(0, len(ids) - 1))
        right = ids[k if k < li else k + 1]
    available = [p for p in aset.profiles if aset.has(right, p)]
    profile = available[int(rng.integers(0, len(available)))]
    return SiamesePair(
        (left, "normal"), (right, profile), int(positive),
        aset.records[left].captions, aset.records[right].captions,
    )

