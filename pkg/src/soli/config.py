"""Training configuration: flat ``key=value`` files with command-line overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, ProfileError
from .imageops import canonical_profile
from .nncore.model import DecoderSpec, EncoderSpec

MODES = ("baseline", "soli-half", "soli-par", "soli-con")

# "lambda" is a keyword, so the attribute is ``lam`` while files and flags say lambda.
_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    gamma: float = 1.0
    lam: float = 1.0
    margin: float = 1.0
    positive_prob: float = 0.5
    seed: int = 0
    profiles: tuple[str, ...] = ("normal",)
    epochs_phase_a: int = 0
    epochs_phase_b: int = 0
    # model hyperparameters, fixed across experiments
    side: int = 32
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64
    token_dim: int = 32
    hidden_dim: int = 128
    min_frequency: int = 1
    max_len: int = 16

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        for name in ("batch_size", "learning_rate", "margin", "side", "embedding_dim",
                     "token_dim", "hidden_dim", "min_frequency", "max_len"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("epochs", "epochs_phase_a", "epochs_phase_b", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.positive_prob <= 1.0:
            raise ConfigError(f"positive_prob must be in [0, 1], got {self.positive_prob}")
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("gamma and lambda must be >= 0")
        if self.mode in ("soli-par", "soli-con") and self.gamma == 0 and self.lam == 0:
            raise ConfigError("gamma and lambda cannot both be zero")
        if self.mode == "soli-con" and self.epochs_phase_a + self.epochs_phase_b < 1:
            raise ConfigError("soli-con needs epochs_phase_a + epochs_phase_b >= 1")
        if not self.profiles or not self.channels or min(self.channels) < 1:
            raise ConfigError("profiles and channels must be non-empty")
        try:
            canon = tuple(dict.fromkeys(canonical_profile(p) for p in self.profiles))
        except ProfileError as exc:
            raise ConfigError(str(exc)) from exc
        return replace(self, profiles=canon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["profiles"] = list(self.profiles)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls().override(d)

    def override(self, values: dict) -> "TrainConfig":
        """Return a copy with ``values`` (strings or typed) applied."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            name = _ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[name] = _coerce(name, types[name], raw)
        return replace(self, **changes)

    @property
    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(self.side, self.channels, self.embedding_dim)

    def decoder_spec(self, vocab_size: int) -> DecoderSpec:
        return DecoderSpec(vocab_size, self.token_dim, self.hidden_dim)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(name, typ, raw):
    typ = str(typ)
    try:
        if "tuple" in typ:
            items = raw.split(",") if isinstance(raw, str) else list(raw)
            items = [str(i).strip() for i in items if str(i).strip()]
            return tuple(int(i) for i in items) if "int" in typ else tuple(items)
        if typ == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if typ == "float":
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """File values first, then ``overrides``; the result is validated."""
    cfg = TrainConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        cfg = cfg.override(parse_config_text(text, str(p)))
    if overrides:
        cfg = cfg.override(overrides)
    return cfg.validate()
