"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RLKV" | uint32 version | uint64 header_len | header (UTF-8 JSON) | payloads

The header holds the model config, a tensor manifest (name, shape, dtype)
in payload order, and provenance.  Payloads are float32 little-endian,
concatenated in manifest order.  The gate matrix, when present, is the
manifest entry named ``adapters.alpha``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import GatingAdapters, ModelConfig

MAGIC = b"RLKV"
VERSION = 1
ADAPTER_KEY = "adapters.alpha"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    adapters: GatingAdapters | None = None
    provenance: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    arrays = {name: np.asarray(getattr(t, "data", t), dtype=_DTYPE) for name, t in ckpt.tensors.items()}
    if ckpt.adapters is not None:
        arrays[ADAPTER_KEY] = np.asarray(ckpt.adapters.alpha, dtype=_DTYPE)
    manifest = [{"name": n, "shape": list(a.shape), "dtype": "float32"} for n, a in arrays.items()]
    header = json.dumps({"model_config": ckpt.config.to_dict(), "manifest": manifest,
                         "provenance": ckpt.provenance}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (supported: {VERSION})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    offset = 16 + hlen
    manifest = header["manifest"]
    expected = sum(int(np.prod(m["shape"], dtype=np.int64)) * _DTYPE.itemsize for m in manifest)
    if len(raw) - offset != expected:
        raise CheckpointError(f"{path}: payload length mismatch, manifest needs {expected} bytes, "
                              f"file has {len(raw) - offset}")
    tensors = {}
    for m in manifest:
        if m.get("dtype") != "float32":
            raise CheckpointError(f"{path}: tensor {m['name']} has unsupported dtype {m.get('dtype')}")
        n = int(np.prod(m["shape"], dtype=np.int64))
        tensors[m["name"]] = np.frombuffer(raw, dtype=_DTYPE, count=n, offset=offset).reshape(m["shape"]).astype(np.float32)
        offset += n * _DTYPE.itemsize
    alpha = tensors.pop(ADAPTER_KEY, None)
    return Checkpoint(ModelConfig(**header["model_config"]), tensors,
                      GatingAdapters(alpha) if alpha is not None else None,
                      header.get("provenance", {}), version)
