"""Compact captioning model: conv encoder -> embedding -> tanh RNN decoder."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ShapeError, VocabularyError
from ..imageops import bilinear_resize
from . import autograd as ag
from .autograd import Tensor
from .vocab import BOS, EOS

DTYPE = np.float32


@dataclass(frozen=True)
class EncoderSpec:
    side: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.embedding_dim <= 0 or self.side < 1 or not self.channels:
            raise ValueError(f"invalid encoder spec {self}")


@dataclass(frozen=True)
class DecoderSpec:
    vocab_size: int
    token_dim: int = 32
    hidden_dim: int = 128

    def __post_init__(self):
        if min(self.vocab_size, self.token_dim, self.hidden_dim) <= 0:
            raise ValueError(f"invalid decoder spec {self}")


@dataclass
class ParamStore:
    """Named parameters with gradient buffers and per-parameter Adam slots."""

    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    opt_state: dict = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(value), requires_grad=True)
        t.zero_grad()
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def reset_optimizer(self):
        self.opt_state = {}

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in self.names(prefix):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = self.astype(DTYPE)
        out.opt_state = {
            n: {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in s.items()}
            for n, s in self.opt_state.items()
        }
        return out


def _glorot(rng: np.random.Generator, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(DTYPE)


def init_params(enc: EncoderSpec, dec: DecoderSpec, seed: int) -> ParamStore:
    rng = np.random.Generator(np.random.Philox(seed))
    ps = ParamStore()
    cin = 3
    for i, cout in enumerate(enc.channels):
        ps.add(f"enc.conv{i}.w", _glorot(rng, (cout, cin, 3, 3), cin * 9, cout * 9))
        ps.add(f"enc.conv{i}.b", np.zeros(cout, DTYPE))
        cin = cout
    E, H, D, M = enc.embedding_dim, dec.hidden_dim, dec.token_dim, dec.vocab_size
    ps.add("enc.proj.w", _glorot(rng, (cin, E), cin, E))
    ps.add("enc.proj.b", np.zeros(E, DTYPE))
    ps.add("dec.init.w", _glorot(rng, (E, H), E, H))
    ps.add("dec.init.b", np.zeros(H, DTYPE))
    ps.add("dec.embed", _glorot(rng, (M, D), M, D))
    ps.add("dec.wx", _glorot(rng, (D, H), D, H))
    ps.add("dec.wh", _glorot(rng, (H, H), H, H))
    ps.add("dec.b", np.zeros(H, DTYPE))
    ps.add("dec.out.w", _glorot(rng, (H, M), H, M))
    ps.add("dec.out.b", np.zeros(M, DTYPE))
    return ps


def preprocess(img: np.ndarray, side: int = 64) -> np.ndarray:
    """Resize to ``side`` x ``side`` and scale to ``[0, 1]``, channels first."""
    r = bilinear_resize(img, side, side)
    if r.ndim == 2:
        r = np.repeat(r[:, :, None], 3, axis=2)
    return (r.astype(DTYPE) / DTYPE(255)).transpose(2, 0, 1).copy()


def encode(ps: ParamStore, batch, spec: EncoderSpec | None = None) -> Tensor:
    """Images ``(B, 3, S, S)`` -> embeddings ``(B, E)``."""
    x = ag.as_tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"encode expects (B, 3, S, S), got {x.shape}")
    if spec is not None and x.shape[2:] != (spec.side, spec.side):
        raise ShapeError(f"encode expected (B, 3, {spec.side}, {spec.side}), got {x.shape}")
    i = 0
    while f"enc.conv{i}.w" in ps:
        x = ag.relu(ag.conv2d(x, ps[f"enc.conv{i}.w"], ps[f"enc.conv{i}.b"]))
        i += 1
    pooled = ag.spatial_mean(x)
    return ag.linear(pooled, ps["enc.proj.w"], ps["enc.proj.b"])


def decode_teacher_forced(ps: ParamStore, embedding, token_ids) -> Tensor:
    """Teacher-forced logits ``(B, T, M)``: step ``t`` consumes ``token_ids[:, t]``."""
    emb = ag.as_tensor(embedding)
    ids = np.asarray(token_ids)
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ShapeError(f"token_ids must be (B, T) with T >= 1, got {ids.shape}")
    if emb.data.ndim != 2 or emb.shape[0] != ids.shape[0]:
        raise ShapeError(f"embedding {emb.shape} does not match token batch {ids.shape}")
    M = ps["dec.embed"].shape[0]
    if ids.min() < 0 or ids.max() >= M:
        raise VocabularyError(f"token id out of range [0, {M}): {int(ids.max())}")
    h = ag.tanh(ag.linear(emb, ps["dec.init.w"], ps["dec.init.b"]))
    hs = []
    for t in range(ids.shape[1]):
        xt = ag.embedding(ids[:, t], ps["dec.embed"])
        h = ag.tanh(ag.matmul(xt, ps["dec.wx"]) + ag.matmul(h, ps["dec.wh"]) + ps["dec.b"])
        hs.append(h)
    return ag.linear(ag.stack(hs, axis=1), ps["dec.out.w"], ps["dec.out.b"])


def greedy_decode(ps: ParamStore, embedding, max_len: int) -> list[list[int]]:
    """Argmax decoding (lowest id wins ties); stops at ``eos`` or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    e = np.asarray(embedding.data if isinstance(embedding, Tensor) else embedding)
    if e.ndim == 1:
        e = e[None, :]
    p = {k: v.data for k, v in ps.items()}
    h = np.tanh(e @ p["dec.init.w"] + p["dec.init.b"])
    tok = np.full(e.shape[0], BOS, dtype=np.intp)
    out = [[] for _ in range(e.shape[0])]
    done = np.zeros(e.shape[0], dtype=bool)
    for _ in range(max_len):
        h = np.tanh(p["dec.embed"][tok] @ p["dec.wx"] + h @ p["dec.wh"] + p["dec.b"])
        logits = h @ p["dec.out.w"] + p["dec.out.b"]
        tok = np.argmax(logits, axis=1)
        for i, t in enumerate(tok):
            if done[i]:
                continue
            if t == EOS:
                done[i] = True
            else:
                out[i].append(int(t))
        if done.all():
            break
    return out


def spec_dict(enc: EncoderSpec, dec: DecoderSpec) -> dict:
    d = {"encoder": asdict(enc), "decoder": asdict(dec)}
    d["encoder"]["channels"] = list(enc.channels)
    return d
