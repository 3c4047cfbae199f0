"""Adam and the four training regimes.

* ``baseline``: cross-entropy on single images drawn from the configured profiles.
* ``soli-half``: contrastive loss on Siamese pairs; only encoder weights move.
* ``soli-par``: ``gamma * contrastive + lambda * cross-entropy`` on Siamese
  pairs, cross-entropy averaged over both branches; everything moves.
* ``soli-con``: a ``soli-half`` phase followed by a ``soli-par`` phase.

Each regime draws from its own RNG stream and starts with fresh optimizer
moments, so a ``soli-con`` phase is bit-identical to the single-mode run it
is composed of. Training can stop at any epoch boundary and resume from the
position recorded in :attr:`TrainLog.resume`.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from .config import TrainConfig
from .dataset import AugmentedSet, sample_pair
from .errors import NonFiniteGradientError, SamplingError
from .imageops import read_image
from .nncore import (
    BOS,
    EOS,
    PAD,
    ParamStore,
    Vocabulary,
    decode_teacher_forced,
    encode,
    init_params,
    no_grad,
    preprocess,
    spec_dict,
)
from .rng import GENERATOR_NAME, make_rng, rng_from_state, rng_state

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def adam_step(ps: ParamStore, lr: float = 1e-3, betas=ADAM_BETAS, eps: float = ADAM_EPS,
              names=None) -> None:
    """One bias-corrected Adam update of ``names`` (default: all) from their ``.grad``.

    Moments and the step count live in ``ps.opt_state`` per parameter. If any
    gradient is non-finite nothing is modified.
    """
    names = list(ps.names()) if names is None else list(names)
    bad = [n for n in names if not np.isfinite(ps[n].grad).all()]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {', '.join(bad)}; step skipped", bad)
    b1, b2 = betas
    for n in names:
        p = ps[n]
        g = p.grad
        st = ps.opt_state.get(n)
        if st is None:
            st = ps.opt_state[n] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
        st["t"] += 1
        t = st["t"]
        st["m"] = (b1 * st["m"] + (1 - b1) * g).astype(p.data.dtype)
        st["v"] = (b2 * st["v"] + (1 - b2) * g * g).astype(p.data.dtype)
        m_hat = st["m"] / (1 - b1 ** t)
        v_hat = st["v"] / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


class TrainData:
    """Training split of an augmented set with tokenized captions and an image cache.

    ``profiles`` limits which variants are drawn; :func:`data_for` takes them from a config.
    """

    def __init__(self, aset: AugmentedSet, vocab: Vocabulary, side: int, max_len: int,
                 split: str = "train", profiles=None):
        self.aset = aset.restrict(split)
        if profiles is not None:
            self.aset = self.aset.select(profiles)
        self.ids = self.aset.image_ids()
        if not self.ids:
            raise SamplingError(f"the {split} split is empty")
        self.vocab = vocab
        self.side = side
        self.captions = {
            i: [vocab.encode(c)[: max_len - 1] for c in self.aset.records[i].captions] for i in self.ids
        }
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def image(self, image_id: str, profile: str) -> np.ndarray:
        key = (image_id, profile)
        x = self._cache.get(key)
        if x is None:
            x = self._cache[key] = preprocess(read_image(self.aset.variant_path(*key)), self.side)
        return x

    def images(self, keys) -> np.ndarray:
        return np.stack([self.image(i, p) for i, p in keys])

    def profiles_for(self, image_id: str) -> list[str]:
        return [p for p in self.aset.profiles if self.aset.has(image_id, p)]

    def caption_batch(self, image_ids, rng: np.random.Generator):
        """Draw one reference per image; returns teacher-forcing inputs and targets."""
        seqs = []
        for i in image_ids:
            caps = self.captions[i]
            seqs.append(caps[int(rng.integers(0, len(caps)))])
        T = max(len(s) for s in seqs) + 1
        inputs = np.full((len(seqs), T), PAD, dtype=np.intp)
        targets = np.full((len(seqs), T), PAD, dtype=np.intp)
        for r, s in enumerate(seqs):
            inputs[r, : len(s) + 1] = [BOS, *s]
            targets[r, : len(s) + 1] = [*s, EOS]
        return inputs, targets


def data_for(cfg: TrainConfig, aset: AugmentedSet, vocab: Vocabulary, split: str = "train") -> TrainData:
    return TrainData(aset, vocab, cfg.side, cfg.max_len, split, cfg.profiles)


@dataclass
class TrainLog:
    seed: int
    mode: str
    records: list = field(default_factory=list)
    phase_boundaries: list = field(default_factory=list)
    resume: dict | None = None
    wall_clock_s: float = 0.0  # reported on stderr only, never serialized

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path, append: bool = False) -> None:
        with open(path, "a" if append else "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    def epoch_summary(self) -> list[dict]:
        keys = ("contrastive", "cross_entropy", "combined", "mean_pos_d", "mean_neg_d")
        groups: dict[int, list] = {}
        for r in self.records:
            groups.setdefault(r["epoch"], []).append(r)
        rows = []
        for epoch, recs in groups.items():
            row = {"epoch": epoch, "regime": recs[0]["regime"], "steps": len(recs), "seed": self.seed}
            for k in keys:
                vals = [r[k] for r in recs if r.get(k) is not None]
                row[k] = float(np.mean(vals)) if vals else None
            rows.append(row)
        return rows

    def summary_csv(self, header_comment: str = "") -> str:
        cols = ["epoch", "regime", "steps", "seed", "contrastive", "cross_entropy", "combined",
                "mean_pos_d", "mean_neg_d"]
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.epoch_summary():
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in cols])
        return buf.getvalue()

    def last(self, key: str, regime: str | None = None):
        for r in reversed(self.records):
            if (regime is None or r["regime"] == regime) and r.get(key) is not None:
                return r[key]
        return None


def new_model(cfg: TrainConfig, vocab: Vocabulary) -> ParamStore:
    return init_params(cfg.encoder_spec, cfg.decoder_spec(vocab.size), make_seed(cfg.seed, "init"))


def make_seed(seed: int, stream: str) -> int:
    return int(make_rng(seed, stream).integers(0, 2**63))


def checkpoint_meta(cfg: TrainConfig, vocab: Vocabulary, log: TrainLog | None = None, **extra) -> dict:
    meta = {
        "specs": spec_dict(cfg.encoder_spec, cfg.decoder_spec(vocab.size)),
        "vocab": vocab.to_dict(),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "generator": GENERATOR_NAME,
        "mode": cfg.mode,
        "resume": None if log is None else log.resume,
    }
    meta.update(extra)
    return meta


# -- per-step objectives ------------------------------------------------------

def baseline_objective(ps, data: TrainData, keys, inputs, targets) -> losses.LossValue:
    emb = encode(ps, data.images(keys))
    return losses.cross_entropy(decode_teacher_forced(ps, emb, inputs), targets)


def half_objective(ps, data: TrainData, pairs, margin: float) -> losses.LossValue:
    ea = encode(ps, data.images([p.left for p in pairs]))
    eb = encode(ps, data.images([p.right for p in pairs]))
    return losses.contrastive(losses.ContrastiveBatch(ea, eb, [p.similarity for p in pairs], margin))


def par_objective(ps, data: TrainData, pairs, caps_a, caps_b, cfg: TrainConfig) -> losses.LossValue:
    ea = encode(ps, data.images([p.left for p in pairs]))
    eb = encode(ps, data.images([p.right for p in pairs]))
    c = losses.contrastive(losses.ContrastiveBatch(ea, eb, [p.similarity for p in pairs], cfg.margin))
    ce_a = losses.cross_entropy(decode_teacher_forced(ps, ea, caps_a[0]), caps_a[1])
    ce_b = losses.cross_entropy(decode_teacher_forced(ps, eb, caps_b[0]), caps_b[1])
    return losses.soli_loss(c, losses.mean_of([ce_a, ce_b], "cross_entropy"), cfg.gamma, cfg.lam)


def probe_objective(ps, data: TrainData, cfg: TrainConfig, n_pairs: int = 64, seed: int = 12345) -> dict:
    """Loss components on a fixed pair sample; lets two parameter sets be compared fairly."""
    rng = make_rng(seed, "analysis")
    pairs = [sample_pair(data.aset, rng, cfg.positive_prob) for _ in range(n_pairs)]
    caps_a = data.caption_batch([p.left[0] for p in pairs], rng)
    caps_b = data.caption_batch([p.right[0] for p in pairs], rng)
    gamma, lam = (cfg.gamma, cfg.lam) if cfg.gamma or cfg.lam else (1.0, 1.0)
    with no_grad():
        loss = par_objective(ps, data, pairs, caps_a, caps_b, replace(cfg, gamma=gamma, lam=lam))
    return dict(loss.components)


# -- epochs ---------------------------------------------------------------------

def _batch_sizes(n: int, bs: int):
    return [min(bs, n - s) for s in range(0, n, bs)]


def _baseline_epoch(ps, data, cfg, rng, emit):
    order = rng.permutation(len(data.ids))
    for s in range(0, len(order), cfg.batch_size):
        ids = [data.ids[k] for k in order[s: s + cfg.batch_size]]
        keys = []
        for i in ids:
            avail = data.profiles_for(i)
            keys.append((i, avail[int(rng.integers(0, len(avail)))]))
        inputs, targets = data.caption_batch(ids, rng)
        ps.zero_grad()
        loss = baseline_objective(ps, data, keys, inputs, targets)
        loss.backward()
        adam_step(ps, cfg.learning_rate)
        emit({"cross_entropy": loss.components["cross_entropy"]})


def _pair_epoch(ps, data, cfg, rng, emit, regime):
    for size in _batch_sizes(len(data.ids), cfg.batch_size):
        pairs = [sample_pair(data.aset, rng, cfg.positive_prob) for _ in range(size)]
        ps.zero_grad()
        if regime == "soli-half":
            loss = half_objective(ps, data, pairs, cfg.margin)
            loss.backward()
            adam_step(ps, cfg.learning_rate, names=ps.names("enc."))
            keep = ("contrastive", "mean_pos_d", "mean_neg_d")
        else:
            caps_a = data.caption_batch([p.left[0] for p in pairs], rng)
            caps_b = data.caption_batch([p.right[0] for p in pairs], rng)
            loss = par_objective(ps, data, pairs, caps_a, caps_b, cfg)
            loss.backward()
            adam_step(ps, cfg.learning_rate)
            keep = ("contrastive", "cross_entropy", "combined", "gamma", "lambda",
                    "mean_pos_d", "mean_neg_d")
        emit({k: loss.components.get(k) for k in keep})


_PLANS = {
    "baseline": lambda c: [("baseline", c.epochs)],
    "soli-half": lambda c: [("soli-half", c.epochs)],
    "soli-par": lambda c: [("soli-par", c.epochs)],
    "soli-con": lambda c: [("soli-half", c.epochs_phase_a), ("soli-par", c.epochs_phase_b)],
}


def _run(cfg: TrainConfig, data: TrainData, params: ParamStore, resume=None,
         stop_after_epochs=None):
    cfg = cfg.validate()
    ps = params.copy()
    log = TrainLog(cfg.seed, cfg.mode)
    pos = dict(resume) if resume else {"phase": 0, "epoch": 0, "step": 0, "global_epoch": 0, "rng": None}
    step, global_epoch, ran = pos["step"], pos["global_epoch"], 0
    start = time.perf_counter()
    plan = _PLANS[cfg.mode](cfg)
    chash = cfg.config_hash()
    for pi, (regime, epochs) in enumerate(plan):
        if pi < pos["phase"] or epochs == 0:
            # an empty phase must not even reset the optimizer
            continue
        if pi == pos["phase"] and pos["rng"] is not None:
            rng, first = rng_from_state(pos["rng"]), pos["epoch"]
        else:
            rng, first = make_rng(cfg.seed, regime), 0
            ps.reset_optimizer()
        if pi > 0 and first == 0:
            log.phase_boundaries.append(step)
        for epoch in range(first, epochs):
            if stop_after_epochs is not None and ran >= stop_after_epochs:
                log.resume = {"phase": pi, "epoch": epoch, "step": step,
                              "global_epoch": global_epoch, "rng": rng_state(rng)}
                log.wall_clock_s = time.perf_counter() - start
                return ps, log

            def emit(values, _epoch=global_epoch, _regime=regime):
                nonlocal step
                step += 1
                rec = {"step": step, "epoch": _epoch, "mode": cfg.mode, "regime": _regime,
                       "seed": cfg.seed, "config_hash": chash}
                if cfg.mode == "soli-con":
                    rec["phase"] = "AB"[pi]
                rec.update(values)
                log.records.append(rec)

            if regime == "baseline":
                _baseline_epoch(ps, data, cfg, rng, emit)
            else:
                _pair_epoch(ps, data, cfg, rng, emit, regime)
            global_epoch += 1
            ran += 1
    log.wall_clock_s = time.perf_counter() - start
    return ps, log


def _checked(cfg: TrainConfig, mode: str) -> TrainConfig:
    if cfg.mode != mode:
        raise ValueError(f"config mode is {cfg.mode!r}, this regime is {mode!r}")
    return cfg


def train_baseline(config: TrainConfig, data: TrainData, params: ParamStore, **kw):
    return _run(_checked(config, "baseline"), data, params, **kw)


def train_soli_half(config: TrainConfig, data: TrainData, params: ParamStore, **kw):
    return _run(_checked(config, "soli-half"), data, params, **kw)


def train_soli_par(config: TrainConfig, data: TrainData, params: ParamStore, **kw):
    return _run(_checked(config, "soli-par"), data, params, **kw)


def train_soli_con(config: TrainConfig, data: TrainData, params: ParamStore, **kw):
    return _run(_checked(config, "soli-con"), data, params, **kw)


TRAINERS = {
    "baseline": train_baseline,
    "soli-half": train_soli_half,
    "soli-par": train_soli_par,
    "soli-con": train_soli_con,
}


def train(config: TrainConfig, data: TrainData, params: ParamStore, **kw):
    return TRAINERS[config.mode](config, data, params, **kw)


def write_log(log: TrainLog, out_prefix, header_comment: str, append: bool = False) -> tuple[Path, Path]:
    """``<prefix>.jsonl`` per step and ``<prefix>.csv`` per epoch."""
    out_prefix = Path(out_prefix)
    jl, cs = out_prefix.with_suffix(".jsonl"), out_prefix.with_suffix(".csv")
    log.write_jsonl(jl, append=append)
    if append and jl.exists():
        records = [json.loads(l) for l in jl.read_text().splitlines() if l.strip()]
        full = TrainLog(log.seed, log.mode, records)
        cs.write_text(full.summary_csv(header_comment))
    else:
        cs.write_text(log.summary_csv(header_comment))
    return jl, cs
