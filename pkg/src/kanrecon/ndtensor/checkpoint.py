"""Binary checkpoint format.

Layout (little-endian)::

    b"KCKPT\\x01"
    u32  tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   rank, then rank x u32 extents
        float64 payload, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Dict, Mapping

import numpy as np

MAGIC = b"KCKPT\x01"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {pos + n} bytes, have {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after {count} tensors")
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
