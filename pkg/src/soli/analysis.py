"""Latent-embedding distance analysis over probe images and their degraded variants.

A few probe images are embedded under every profile; the report holds the
probe-averaged Euclidean distance between every pair of profiles and, as a
control, the distance from each profile's embedding to the embedding of an
unrelated image.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .dataset import AugmentedSet
from .errors import SamplingError
from .imageops import read_image
from .nncore import ParamStore, encode, no_grad, preprocess
from .rng import make_rng

CONTROL = "__control__"


@dataclass(frozen=True)
class DistanceReport:
    probe_ids: tuple[str, ...]
    control_id: str
    profiles: tuple[str, ...]
    matrix: tuple[tuple[float, ...], ...]
    control: tuple[float, ...]
    seed: int

    @property
    def cross_profile_mean(self) -> float:
        """Mean of the off-diagonal entries."""
        n = len(self.profiles)
        if n < 2:
            return 0.0
        m = np.array(self.matrix)
        return float((m.sum() - np.trace(m)) / (n * (n - 1)))

    @property
    def control_mean(self) -> float:
        return float(np.mean(self.control))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "probe_ids": list(self.probe_ids),
            "control_id": self.control_id,
            "profiles": list(self.profiles),
            "matrix": [list(r) for r in self.matrix],
            "control": list(self.control),
            "cross_profile_mean": self.cross_profile_mean,
            "control_mean": self.control_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceReport":
        return cls(tuple(d["probe_ids"]), d["control_id"], tuple(d["profiles"]),
                   tuple(tuple(float(x) for x in r) for r in d["matrix"]),
                   tuple(float(x) for x in d["control"]), int(d["seed"]))


def embed_variants(ps: ParamStore, aset: AugmentedSet, image_id: str, profiles, side: int) -> np.ndarray:
    batch = np.stack([preprocess(read_image(aset.variant_path(image_id, p)), side) for p in profiles])
    with no_grad():
        return np.asarray(encode(ps, batch).data, dtype=np.float64)


def pick_probes(aset: AugmentedSet, n_probes: int, seed: int, split: str | None = None):
    ids = [i for i in aset.image_ids(split) if all(aset.has(i, p) for p in aset.profiles)]
    if n_probes < 1 or len(ids) < n_probes + 1:
        raise SamplingError(f"need at least {n_probes + 1} images with every variant, found {len(ids)}")
    pick = make_rng(seed, "analysis").choice(len(ids), n_probes + 1, replace=False)
    return [ids[k] for k in pick[:-1]], ids[pick[-1]]


def embedding_distance_report(ps: ParamStore, aset: AugmentedSet, side: int, n_probes: int = 5,
                              seed: int = 0, split: str | None = None) -> DistanceReport:
    probes, control_id = pick_probes(aset, n_probes, seed, split)
    profiles = tuple(aset.profiles)
    ctrl = embed_variants(ps, aset, control_id, ["normal"], side)[0]
    P = len(profiles)
    mat = np.zeros((P, P))
    col = np.zeros(P)
    for pid in probes:
        e = embed_variants(ps, aset, pid, profiles, side)
        diff = e[:, None, :] - e[None, :, :]
        mat += np.sqrt((diff * diff).sum(axis=2))
        col += np.linalg.norm(e - ctrl, axis=1)
    mat /= len(probes)
    col /= len(probes)
    mat = (mat + mat.T) / 2
    np.fill_diagonal(mat, 0.0)
    return DistanceReport(tuple(probes), control_id, profiles,
                          tuple(tuple(float(x) for x in r) for r in mat),
                          tuple(float(x) for x in col), int(seed))


# -- output ---------------------------------------------------------------------

def report_csv(report: DistanceReport, header_comment: str = "") -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["profile_a", "profile_b", "mean_distance"])
    for i, a in enumerate(report.profiles):
        for j, b in enumerate(report.profiles):
            w.writerow([a, b, repr(report.matrix[i][j])])
        w.writerow([a, CONTROL, repr(report.control[i])])
    return buf.getvalue()


def report_json(report: DistanceReport, extra: dict | None = None) -> str:
    d = report.to_dict()
    if extra:
        d.update(extra)
    return json.dumps(d, sort_keys=True, indent=1) + "\n"


def _color(v: float, vmax: float) -> str:
    t = 0.0 if vmax <= 0 else min(1.0, v / vmax)
    # white (close) to dark blue (far)
    r, g, b = (int(round(255 + (c - 255) * t)) for c in (23, 55, 120))
    return f"#{r:02x}{g:02x}{b:02x}"


def report_svg(report: DistanceReport, title: str = "") -> str:
    cell, label = 44, 110
    P = len(report.profiles)
    cols = P + 1
    width = label + cols * cell + 20
    height = label + P * cell + 40
    vmax = max([max(r) for r in report.matrix] + list(report.control) + [0.0])
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<title>{escape(title or "embedding distances")}</title>',
    ]
    heads = list(report.profiles) + ["control"]
    for j, name in enumerate(heads):
        x = label + j * cell + cell / 2
        out.append(f'<text x="{x:.1f}" y="{label - 6}" transform="rotate(-60 {x:.1f} {label - 6})">'
                   f"{escape(name)}</text>")
    for i, a in enumerate(report.profiles):
        y = label + i * cell
        out.append(f'<text x="{label - 6}" y="{y + cell / 2 + 3:.1f}" text-anchor="end">{escape(a)}</text>')
        row = list(report.matrix[i]) + [report.control[i]]
        for j, v in enumerate(row):
            x = label + j * cell + (6 if j == P else 0)
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(v, vmax)}" '
                       f'stroke="#ffffff"/>')
            ink = "#ffffff" if vmax > 0 and v / vmax > 0.55 else "#000000"
            out.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 3:.1f}" text-anchor="middle" '
                       f'fill="{ink}">{_fmt(v)}</text>')
    out.append(f'<text x="{label}" y="{height - 12}">seed {report.seed}; probes '
               f'{escape(", ".join(report.probe_ids))}; control {escape(report.control_id)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    digits = max(0, 2 - int(math.floor(math.log10(abs(v)))))
    return f"{v:.{min(digits, 4)}f}"


def emit_report(report: DistanceReport, path, fmt: str | None = None, header_comment: str = "",
                extra: dict | None = None) -> Path:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "csv":
        text = report_csv(report, header_comment)
    elif fmt == "json":
        text = report_json(report, extra)
    elif fmt == "svg":
        text = report_svg(report, header_comment)
    else:
        raise ValueError(f"unknown report format {fmt!r}; expected csv, json or svg")
    path.write_text(text, encoding="utf-8")
    return path
