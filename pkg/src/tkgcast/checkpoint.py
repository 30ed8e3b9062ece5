"""Named-tensor checkpoint container.

Binary layout (little-endian):

    magic    4 bytes  b"NTC1"
    version  uint32
    meta     uint32 length + UTF-8 JSON object (strings only)
    count    uint32
    per tensor:
        name   uint32 length + UTF-8 bytes
        ndim   uint32
        dims   int64 * ndim
        data   float64 * prod(dims), row-major

Doubles are written verbatim, so save/load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .numcore import ParamSet

MAGIC = b"NTC1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path, params: ParamSet, meta: dict[str, str] | None = None) -> None:
    meta = {str(k): str(v) for k, v in (meta or {}).items()}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            shape = tuple(tensor.shape)
            fh.write(struct.pack("<I", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<q", dim))
            fh.write(tensor.detach().numpy().astype("<f8", copy=False).tobytes())


def load(path) -> tuple[ParamSet, dict[str, str]]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a named-tensor checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params = ParamSet()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(
                struct.unpack("<q", fh.read(8))[0] for _ in range(ndim)
            )
            numel = 1
            for dim in shape:
                numel *= dim
            raw = fh.read(8 * numel)
            if len(raw) != 8 * numel:
                raise CheckpointError(f"{path}: truncated tensor '{name}'")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            params.add(name, torch.from_numpy(arr))
        return params, meta
