"""Model checkpoints.

Layout (little-endian): magic ``b"SRMC"``, uint16 version, uint16 reserved,
uint64 header length, a UTF-8 JSON header ``{"config": ..., "params":
[{"name", "shape"}, ...]}`` with sorted keys, then every param's values as
float64 in header order.  Writing the same model twice gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .moe import ModelConfig, SrMoeModel

MAGIC = b"SRMC"
VERSION = 1
_PREFIX = struct.Struct("<4sHHQ")


class CheckpointError(ValueError):
    pass


def to_bytes(model: SrMoeModel) -> bytes:
    params = model.params()
    header = {
        "config": model.cfg.to_dict(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(p.value.astype("<f8").tobytes() for p in params)
    return _PREFIX.pack(MAGIC, VERSION, 0, len(hb)) + hb + body


def from_bytes(raw: bytes) -> SrMoeModel:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, _, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
        model = SrMoeModel.init(ModelConfig.from_dict(header["config"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    params = model.params()
    entries = header["params"]
    if [e["name"] for e in entries] != [p.name for p in params]:
        raise CheckpointError("param list does not match the config")
    off = _PREFIX.size + hlen
    for p, e in zip(params, entries):
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"{p.name}: shape {e['shape']} != {list(p.shape)}")
        n = p.value.size
        if off + 8 * n > len(raw):
            raise CheckpointError("truncated checkpoint body")
        p.value[...] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(p.shape)
        off += 8 * n
    if off != len(raw):
        raise CheckpointError("trailing bytes after checkpoint body")
    return model


def save(model: SrMoeModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> SrMoeModel:
    return from_bytes(Path(path).read_bytes())


def snapshot(model: SrMoeModel) -> list[np.ndarray]:
    return [p.value.copy() for p in model.params()]


def restore(model: SrMoeModel, snap: list[np.ndarray]) -> None:
    params = model.params()
    if len(params) != len(snap):
        raise CheckpointError("snapshot does not match model structure")
    for p, v in zip(params, snap):
        if p.shape != v.shape:
            raise CheckpointError(f"{p.name}: snapshot shape {v.shape} != {p.shape}")
        p.value[...] = v


def param_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(p.value.tobytes())
    return h.hexdigest()
