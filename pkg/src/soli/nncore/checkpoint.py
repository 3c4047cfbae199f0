"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SOLICKPT" | u32 version | u64 header length | header JSON (utf-8)
    | raw <f4 blocks in header order | sha256 of everything before it

The header lists every block (parameters, then Adam moments) with its name
and shape, and carries arbitrary JSON metadata: vocabulary, architecture,
training config, RNG state and schedule position.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, SpecMismatchError
from .model import DTYPE, ParamStore

MAGIC = b"SOLICKPT"
VERSION = 1
_DIGEST = 32


def _blocks(ps: ParamStore):
    for name, t in ps.items():
        yield name, "param", t.data
    for name in ps.names():
        st = ps.opt_state.get(name)
        if st is None:
            continue
        yield name, "adam_m", st["m"]
        yield name, "adam_v", st["v"]


def dumps(ps: ParamStore, meta: dict) -> bytes:
    entries, payload = [], []
    for name, kind, arr in _blocks(ps):
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "kind": kind, "shape": list(a.shape)})
        payload.append(a.tobytes())
    steps = {n: int(s["t"]) for n, s in ps.opt_state.items()}
    header = {"format_version": VERSION, "tensors": entries, "adam_steps": steps, "meta": meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def loads(raw: bytes) -> tuple[ParamStore, dict]:
    if len(raw) < len(MAGIC) + 12 + _DIGEST or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    off = len(MAGIC) + 12
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen

    ps = ParamStore()
    moments: dict[str, dict] = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(e["shape"]).astype(DTYPE)
        off += 4 * n
        if e["kind"] == "param":
            ps.add(e["name"], a)
        else:
            moments.setdefault(e["name"], {})["m" if e["kind"] == "adam_m" else "v"] = a
    if off != len(body):
        raise CheckpointError("checkpoint payload length does not match header")
    for name, st in moments.items():
        st["t"] = int(header["adam_steps"][name])
        ps.opt_state[name] = st
    return ps, header["meta"]


def save_checkpoint(ps: ParamStore, meta: dict, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ps, meta))
    os.replace(tmp, path)


def load_checkpoint(path, expected_specs: dict | None = None) -> tuple[ParamStore, dict]:
    """Load and verify a checkpoint; optionally insist on an architecture."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ps, meta = loads(raw)
    if expected_specs is not None and meta.get("specs") != expected_specs:
        raise SpecMismatchError(
            f"checkpoint architecture {meta.get('specs')} does not match configured {expected_specs}"
        )
    return ps, meta
