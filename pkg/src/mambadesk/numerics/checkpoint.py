"""Flat binary checkpoint files.

Layout (all integers little-endian)::

    b"MAMBADSK"  magic
    u8           version
    u32          header length, then that many bytes of UTF-8 key=value text
    records until EOF:
        u32 name length, UTF-8 name, u32 rank, rank x u64 extents,
        prod(extents) x f64 values in row-major order

Plain tensor files carry an empty header; model checkpoints put the
architecture config there.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"MAMBADSK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], header: str = "") -> None:
    blob = bytearray(MAGIC)
    blob += struct.pack("<B", VERSION)
    head = header.encode("utf-8")
    blob += struct.pack("<I", len(head)) + head
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw)) + raw
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], str]:
    """Return ``(tensors, header)``; tensor order is preserved."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<B", buf, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos += 1
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = buf[pos : pos + hlen].decode("utf-8")
    pos += hlen
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
            out[name] = arr.astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    return out, header
