"""Binary checkpoints: magic, version, JSON manifest, raw little-endian payloads.

Layout::

    b"DFAD" | u32 version | u32 header_len | header JSON (utf-8) | payloads

The header holds the model config and a manifest with one entry per
tensor (parameters first, then batch-norm buffers) giving name, group,
trainable flag, dtype, shape and the byte offset relative to the start of
the payload region.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .model import GROUPS, Model, build_model
from .vit import ModelConfig

MAGIC = b"DFAD"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def _entries(model: Model):
    for name, p in model.params.items():
        yield name, p.group, p.trainable, "param", p.tensor.data
    for name, buf in model.buffers.items():
        yield name, name.split(".")[0], False, "buffer", buf


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    manifest, blobs, offset = [], [], 0
    for name, group, trainable, kind, arr in _entries(model):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        manifest.append({
            "name": name, "group": group, "trainable": bool(trainable), "kind": kind,
            "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {"config": model.config.to_dict(), "manifest": manifest}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, {name: array}) without building a model."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated (no header)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    arrays = {}
    for ent in header["manifest"]:
        lo = start + ent["offset"]
        if lo + ent["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated payload at tensor {ent['name']}")
        arr = np.frombuffer(data, dtype=np.dtype(ent["dtype"]), count=int(np.prod(ent["shape"], dtype=np.int64)),
                            offset=lo)
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return header, arrays


def load_into(model: Model, path, groups: Optional[Iterable[str]] = None) -> Model:
    """Copy tensors of the selected groups (default: all) from ``path`` into ``model``.

    The set of names in each selected group must match the model exactly.
    """
    header, arrays = read_checkpoint(path)
    groups = tuple(GROUPS if groups is None else groups)
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise CheckpointError(f"unknown groups {sorted(unknown)}")
    by_name = {e["name"]: e for e in header["manifest"]}
    want = {n for n, g, *_ in _entries(model) if g in groups}
    have = {n for n, e in by_name.items() if e["group"] in groups}
    if want != have:
        missing, surplus = sorted(want - have), sorted(have - want)
        raise CheckpointError(f"tensor names differ for groups {list(groups)}: "
                              f"missing {missing[:5]}, unexpected {surplus[:5]}")
    for name in want:
        arr = arrays[name]
        if name in model.params:
            t = model.params[name].tensor
            if t.data.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != model {t.data.shape}")
            t.data = arr.astype(t.data.dtype)
        else:
            buf = model.buffers[name]
            if buf.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != model {buf.shape}")
            buf[...] = arr  # layers hold this array, so write in place
    return model


def load_checkpoint(path) -> Model:
    """Rebuild the model described by the checkpoint header and fill every tensor."""
    header, _ = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, seed=0)
    return load_into(model, path)
