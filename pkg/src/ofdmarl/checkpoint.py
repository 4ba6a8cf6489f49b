"""Flat binary checkpoint format.

Layout (all integers little-endian):

    bytes 0..7   magic "OFDMARL1"
    u32          tensor count
    per tensor:
        u32      name length, then UTF-8 name
        u32      rank
        u64[rank] dims
        f64[prod(dims)] values, row-major
    u32          metadata length, then UTF-8 JSON metadata

Round-trips are bit-exact: loading and re-saving a checkpoint reproduces the
file byte for byte (tensor order is preserved).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OFDMARL1"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        # asarray keeps 0-d tensors 0-d (ascontiguousarray would promote them)
        data = np.asarray(tensor, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    offset = 8

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n_values = 1
        for d in dims:
            n_values *= d
        values = np.frombuffer(raw, dtype="<f8", count=n_values, offset=offset)
        offset += n_values * 8
        tensors[name] = values.reshape(dims).astype(float)
    (meta_len,) = take("<I")
    meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    return tensors, meta
