"""Caption tokenizer and frequency-thresholded vocabulary."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass

from ..errors import VocabularyError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile(r"[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, turn punctuation into spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    min_frequency: int = 1

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            raise VocabularyError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, text: str | list[str]) -> list[int]:
        words = tokenize(text) if isinstance(text, str) else text
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "min_frequency": self.min_frequency}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), int(d.get("min_frequency", 1)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def build_vocabulary(captions, min_frequency: int = 1) -> Vocabulary:
    """Keep tokens seen at least ``min_frequency`` times.

    Ordering is frequency descending, then lexicographic, so the id assignment
    depends only on the multiset of tokens.
    """
    counts = Counter()
    n = 0
    for c in captions:
        counts.update(tokenize(c))
        n += 1
    if n == 0 or not counts:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, k in counts.items() if k >= min_frequency and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + tuple(kept), min_frequency)
