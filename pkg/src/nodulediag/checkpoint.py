"""Binary checkpoint files: versioned header plus named tensor records.

Layout (all integers little-endian u32 unless noted):

    magic    8 bytes  b"NDLGCKPT"
    version  u32
    config   u32 length + UTF-8 JSON
    count    u32
    records  count * (u32 name length + UTF-8 name + tensor bytes)

Tensor bytes follow the shape-header format in `tensor.tensor_to_bytes`.
Records are written in insertion order and must round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"NDLGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = checkpoint_bytes(config, tensors)
    Path(path).write_bytes(blob)


def checkpoint_bytes(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(tensor_to_bytes(arr))
    return b"".join(parts)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    (cfg_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    config = json.loads(buf[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        arr, used = tensor_from_bytes(buf, pos)
        pos += used
        tensors[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, tensors
