"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    bytes 0..7    magic b"DFUXCKPT"
    bytes 8..11   uint32 format version (1)
    bytes 12..19  uint64 manifest length L
    next L bytes  UTF-8 JSON manifest (sorted keys)
    payloads      raw tensors, back to back, in manifest order

The manifest holds the network config, the offset-channel layout string, the
tensor table (name, shape, dtype, byte offset relative to the payload start,
byte count) and a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .deform import OFFSET_LAYOUT
from .network import Model, NetworkConfig, build_network

MAGIC = b"DFUXCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    table, blobs, offset = [], [], 0
    for name in state:
        a = np.ascontiguousarray(state[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        table.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": "deformux-checkpoint", "version": VERSION, "config": model.cfg.to_dict(),
                "offset_layout": OFFSET_LAYOUT, "tensors": table, "meta": meta or {}}
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(text)))
        f.write(text)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Return (manifest, tensors) after validating the container."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _HEADER.size + length
    if start > len(data):
        raise CheckpointError(f"{path}: manifest length {length} exceeds file size")
    manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
    if manifest.get("offset_layout") != OFFSET_LAYOUT:
        raise CheckpointError(f"{path}: offset layout {manifest.get('offset_layout')!r} != {OFFSET_LAYOUT!r}")
    tensors = {}
    for t in manifest["tensors"]:
        lo = start + t["offset"]
        hi = lo + t["nbytes"]
        dt = np.dtype(t["dtype"])
        if hi > len(data) or t["nbytes"] != int(np.prod(t["shape"], dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: tensor {t['name']!r} payload is truncated or mis-sized")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(t["shape"], dtype=np.int64)), offset=lo)
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(dt.newbyteorder("="))
    return manifest, tensors


def load_checkpoint(path) -> Tuple[Model, dict]:
    """Rebuild the model stored at ``path``; returns (model, meta)."""
    manifest, tensors = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(manifest["config"])
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    model = build_network(cfg, seed=0, dtype=dtype)
    model.load_state_dict(tensors)
    return model, manifest.get("meta", {})
