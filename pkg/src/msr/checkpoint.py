"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 version, uint64 header length, a JSON header
(sorted keys, compact separators), then the raw little-endian float64 payload
of every array in header order.  Identical state gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meta import AdamState, MetaModel

MAGIC = b"MSRCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_spec: dict
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    rng_state: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)

    def model(self) -> MetaModel:
        return MetaModel.from_spec(self.model_spec, self.params)


def from_model(model: MetaModel, adam: AdamState | None = None, rng_state=None,
               step: int = 0, extra: dict | None = None) -> Checkpoint:
    params = {k: p.data.copy() for k, p in model.params.items()}
    return Checkpoint(model.spec(), params, adam, rng_state, step, dict(extra or {}))


def _arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in sorted(ck.params.items())]
    if ck.adam is not None:
        out += [(f"adam_m/{k}", v) for k, v in sorted(ck.adam.m.items())]
        out += [(f"adam_v/{k}", v) for k, v in sorted(ck.adam.v.items())]
    return out


def dumps(ck: Checkpoint) -> bytes:
    arrays = _arrays(ck)
    entries = []
    offset = 0
    for name, arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    adam = None
    if ck.adam is not None:
        a = ck.adam
        adam = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
    header = {
        "model": ck.model_spec,
        "arrays": entries,
        "adam": adam,
        "rng_state": ck.rng_state,
        "step": ck.step,
        "extra": ck.extra,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def loads(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise CheckpointError("checkpoint truncated inside header")
    header = json.loads(buf[_PREFIX.size:start])
    params, m, v = {}, {}, {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        if lo + 8 * n > len(buf):
            raise CheckpointError(f"array {e['name']} truncated at byte {lo}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=lo).reshape(e["shape"]).astype(np.float64)
        kind, key = e["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][key] = arr
    adam = None
    if header["adam"] is not None:
        adam = AdamState(**header["adam"], m=m, v=v)
    return Checkpoint(header["model"], params, adam, header["rng_state"], header["step"], header["extra"])


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ck))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
