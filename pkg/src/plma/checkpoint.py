"""Binary checkpoint: b"PLMA", u32 version, u64 header length, JSON header, raw arrays.

All integers and arrays are little-endian. The header records the encoder
config and a manifest of (name, shape, dtype, offset) entries whose offsets
are relative to the first byte after the header; arrays follow in manifest
order. Extra header keys carry the tokenizer, the lab catalog and the run
configuration so a checkpoint is self-contained.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import AttributionModel, EncoderConfig
from . import tensor as T

MAGIC = b"PLMA"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: AttributionModel
    labs: list[str]
    tokenizer: str
    run: dict = field(default_factory=dict)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, p in ckpt.model.params.items():
        dt = _DTYPES[p.dtype.name]
        raw = np.ascontiguousarray(p.data, dtype=dt).tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "dtype": dt, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.model.config.to_dict(),
        "tensors": manifest,
        "labs": ckpt.labs,
        "tokenizer": ckpt.tokenizer,
        "run": ckpt.run,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(payload: bytes) -> Checkpoint:
    if payload[:4] != MAGIC:
        raise CheckpointError("not a PLMA checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", payload[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(payload[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    config = EncoderConfig.from_dict(header["config"])
    params = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        end = start + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"truncated checkpoint at tensor {entry['name']}")
        arr = np.frombuffer(payload[start:end], dtype=dt).reshape(entry["shape"])
        params[entry["name"]] = T.Tensor(arr.astype(dt.newbyteorder("="), copy=True), requires_grad=True,
                                         name=entry["name"])
    return Checkpoint(AttributionModel(config, params), header["labs"], header["tokenizer"], header.get("run", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    payload = to_bytes(ckpt)
    atomic_write_bytes(path, payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
