"""Seeded Philox4x64 streams with JSON-serialisable state."""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "philox4x64"

# Independent sub-streams derived from one user seed.
STREAMS = {
    "init": 0,
    "baseline": 1,
    "soli-half": 2,
    "soli-par": 3,
    "synth": 4,
    "analysis": 5,
    "sampler": 6,
}


def make_rng(seed: int, stream: str = "sampler") -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), STREAMS[stream]])
    return np.random.Generator(np.random.Philox(ss))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [int(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.integer):
        return int(v)
    return v


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    s = dict(state)
    inner = dict(s["state"])
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    s["state"] = inner
    s["buffer"] = np.array(s["buffer"], dtype=np.uint64)
    bg.state = s
    return np.random.Generator(bg)


def bernoulli(rng: np.random.Generator, p: float) -> bool:
    """Integer-only coin: compare a 53-bit draw against ``round(p * 2**53)``."""
    threshold = int(round(p * (1 << 53)))
    return int(rng.integers(0, 1 << 53)) < threshold
