"""Caption scoring: corpus BLEU and an exact+stem METEOR, plus checkpoint evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from nltk.stem import PorterStemmer

from .dataset import AugmentedSet
from .errors import ImageError, SamplingError
from .imageops import canonical_profile, read_image
from .nncore import Vocabulary, encode, greedy_decode, load_checkpoint, no_grad, preprocess, tokenize

_STEMMER = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _STEMMER.stem(word)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU with clipped counts, uniform weights, no smoothing.

    ``references[k]`` is the list of reference token lists for ``candidates[k]``.
    The reference length for the brevity penalty is the closest one per
    candidate (shorter wins ties), summed over the corpus.
    """
    if not candidates:
        raise ValueError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matched[n - 1] += sum(min(k, best[g]) for g, k in counts.items())
            total[n - 1] += max(0, len(cand) - n + 1)
    if c_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


@dataclass(frozen=True)
class Alignment:
    matches: int
    exact: int
    chunks: int


def align(candidate, reference) -> Alignment:
    """Non-crossing word alignment, preferring exact matches, then more matches, then fewer chunks."""
    n, m = len(candidate), len(reference)
    cs = [stem(w) for w in candidate]
    rs = [stem(w) for w in reference]
    # best[i][j][a]: (exact, matches, -chunks) for the suffixes from (i, j);
    # a = 1 when the previous step matched (i-1, j-1), so a match here extends its chunk.
    NEG = (-1, -1, 0)
    best = [[[NEG, NEG] for _ in range(m + 1)] for _ in range(n + 1)]
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            for a in (0, 1):
                if i == n or j == m:
                    best[i][j][a] = (0, 0, 0)
                    continue
                cand = max(best[i + 1][j][0], best[i][j + 1][0])
                if cs[i] == rs[j]:
                    e, k, c = best[i + 1][j + 1][1]
                    cand = max(cand, (e + (candidate[i] == reference[j]), k + 1, c - (0 if a else 1)))
                best[i][j][a] = cand
    e, k, c = best[0][0][0]
    return Alignment(k, e, -c)


def meteor_single(candidate, reference) -> float:
    if not candidate or not reference:
        return 0.0
    al = align(candidate, reference)
    if al.matches == 0:
        return 0.0
    p = al.matches / len(candidate)
    r = al.matches / len(reference)
    f = 10 * p * r / (r + 9 * p)
    return f * (1 - 0.5 * (al.chunks / al.matches) ** 3)


def meteor(candidate, references) -> float:
    """Best score against any single reference."""
    if not references:
        raise ValueError("meteor needs at least one reference")
    return max(meteor_single(candidate, r) for r in references)


def corpus_meteor(candidates, references) -> float:
    if not candidates:
        raise ValueError("meteor needs at least one candidate")
    return float(np.mean([meteor(c, r) for c, r in zip(candidates, references)]))


# -- checkpoint evaluation ------------------------------------------------------

@dataclass
class EvalResult:
    checkpoint_id: str
    split: str
    rows: list = field(default_factory=list)  # {profile, B1, B4, M, n}
    missing: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.missing

    def row(self, profile: str) -> dict:
        for r in self.rows:
            if r["profile"] == profile:
                return r
        raise KeyError(profile)

    def to_dict(self) -> dict:
        return {"checkpoint_id": self.checkpoint_id, "split": self.split, "rows": self.rows,
                "missing": self.missing}

    def to_csv(self, header_comment: str = "") -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["profile", "B1", "B4", "M"])
        for r in self.rows:
            w.writerow([r["profile"], f"{r['B1']:.6f}", f"{r['B4']:.6f}", f"{r['M']:.6f}"])
        return buf.getvalue()

    def to_json(self, extra: dict | None = None) -> str:
        d = self.to_dict()
        if extra:
            d.update(extra)
        return json.dumps(d, sort_keys=True, indent=1) + "\n"


def caption_images(ps, vocab: Vocabulary, images, side: int, max_len: int, batch_size: int = 64):
    """Greedy captions (token lists) for a list of uint8 images."""
    out = []
    for s in range(0, len(images), batch_size):
        x = np.stack([preprocess(img, side) for img in images[s:s + batch_size]])
        with no_grad():
            emb = encode(ps, x).data
        out.extend(vocab.decode(ids) for ids in greedy_decode(ps, emb, max_len))
    return out


def evaluate_model(ps, vocab: Vocabulary, side: int, max_len: int, aset: AugmentedSet, profiles,
                   split: str = "test", checkpoint_id: str = "") -> EvalResult:
    ids = aset.image_ids(split)
    if not ids:
        raise SamplingError(f"the {split} split is empty")
    result = EvalResult(checkpoint_id, split)
    for prof in (canonical_profile(p) for p in profiles):
        images, refs = [], []
        for iid in ids:
            try:
                images.append(read_image(aset.variant_path(iid, prof)))
            except (KeyError, ImageError) as exc:
                result.missing.append({"image_id": iid, "profile": prof, "error": str(exc)})
                continue
            refs.append([tokenize(c) for c in aset.records[iid].captions])
        if not images:
            continue
        cands = caption_images(ps, vocab, images, side, max_len)
        result.rows.append({
            "profile": prof,
            "B1": bleu(cands, refs, 1),
            "B4": bleu(cands, refs, 4),
            "M": corpus_meteor(cands, refs),
            "n": len(cands),
        })
    if result.rows:
        result.rows.append({
            "profile": "Mean",
            **{k: float(np.mean([r[k] for r in result.rows])) for k in ("B1", "B4", "M")},
            "n": sum(r["n"] for r in result.rows),
        })
    return result


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluate_checkpoint(checkpoint, aset: AugmentedSet, profiles, split: str = "test") -> EvalResult:
    ps, meta = load_checkpoint(checkpoint)
    cfg = meta["config"]
    return evaluate_model(ps, Vocabulary.from_dict(meta["vocab"]), cfg["side"], cfg["max_len"], aset,
                          profiles, split, checkpoint_id(checkpoint))
