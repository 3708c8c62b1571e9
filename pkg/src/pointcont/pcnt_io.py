"""PCNT binary tensor container.

Layout (all integers little-endian):

    magic   4 bytes      b"PCNT"
    version u32          currently 1
    count   u32          number of tensors
    per tensor:
        name_len u16, then UTF-8 name bytes
        rank     u8
        dims     u32 * rank
        payload  float32 * prod(dims), IEEE-754 little-endian, row-major

Used both for model checkpoints (parameters plus batch-norm running stats)
and for toy dataset splits (a points tensor and a labels tensor).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PCNT"
VERSION = 1


class PcntError(ValueError):
    """Malformed container or tensor mismatch."""


def write_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value).astype("<f4", copy=False)
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise PcntError(f"tensor name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise PcntError(f"tensor rank too large: {name!r}")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise PcntError("bad magic, not a PCNT file")
    if len(data) < 12:
        raise PcntError("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise PcntError(f"unsupported version {version}")
    off = 12
    out = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = off + 4 * n
            if end > len(data):
                raise struct.error("payload past end of file")
            arr = np.frombuffer(data[off:end], dtype="<f4").reshape(dims)
            off = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise PcntError(f"truncated or corrupt tensor record: {exc}") from exc
        if name in out:
            raise PcntError(f"duplicate tensor name '{name}'")
        out[name] = arr.copy()
    if off != len(data):
        raise PcntError("trailing bytes after last tensor")
    return out
