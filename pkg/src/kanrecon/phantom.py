"""Synthetic ellipse phantoms and the ``KREC`` dataset file format."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from kanrecon.ndtensor.checkpoint import atomic_write_bytes

MASK64 = (1 << 64) - 1
DATASET_MAGIC = b"KREC"
DATASET_VERSION = 1
HEADER = struct.Struct("<4sBIII")


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class ShapeOverflowError(DatasetError):
    pass


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood); portable and bit-exact."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    n_ellipses: int = 10
    intensity_range: Tuple[float, float] = (0.1, 0.5)
    seed: int = 0


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Shepp-Logan-style phantom: a bright rim, a darker body, random inclusions.

    The rim is the brightest structure and is never overlapped, so the
    image maximum is exactly 1 and covers a visible fraction of pixels.
    """
    n = spec.size
    if n < 16 or n & (n - 1):
        raise ValueError(f"phantom size must be a power of two >= 16, got {n}")
    if spec.n_ellipses < 1:
        raise ValueError("phantom needs at least one ellipse")
    lo, hi = spec.intensity_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"invalid intensity range {spec.intensity_range}")
    rng = SplitMix64(spec.seed)
    coords = (np.arange(n) + 0.5) * (2.0 / n) - 1.0
    xx, yy = np.meshgrid(coords, coords)
    img = np.zeros((n, n))

    cx, cy = rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)
    a, b = rng.uniform(0.65, 0.85), rng.uniform(0.75, 0.92)
    theta = rng.uniform(-0.3, 0.3)
    img[_ellipse(xx, yy, cx, cy, a, b, theta)] += 1.0
    if spec.n_ellipses >= 2:
        shrink = rng.uniform(0.78, 0.86)
        body = rng.uniform(0.2, 0.45)
        img[_ellipse(xx, yy, cx, cy, a * shrink, b * shrink, theta)] -= 1.0 - body
        ia, ib = a * shrink, b * shrink
        for _ in range(spec.n_ellipses - 2):
            # keep inclusions strictly inside the body so the rim survives
            r = rng.uniform(0.0, 0.55)
            phi = rng.uniform(0.0, 2.0 * np.pi)
            ex = cx + r * ia * np.cos(phi) * np.cos(theta) - r * ib * np.sin(phi) * np.sin(theta)
            ey = cy + r * ia * np.cos(phi) * np.sin(theta) + r * ib * np.sin(phi) * np.cos(theta)
            ea = rng.uniform(0.06, 0.4) * ia * (1.0 - r)
            eb = rng.uniform(0.06, 0.4) * ib * (1.0 - r)
            et = rng.uniform(0.0, np.pi)
            val = rng.uniform(lo, hi) * (1.0 if rng.uniform() < 0.6 else -1.0)
            img[_ellipse(xx, yy, ex, ey, max(ea, 1e-3), max(eb, 1e-3), et)] += val
        inner = _ellipse(xx, yy, cx, cy, ia, ib, theta)
        img[inner] = np.clip(img[inner], 0.0, 0.95)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(n: int, size: int, seed: int, n_ellipses: int = 10) -> np.ndarray:
    """``n`` phantoms with per-sample seeds ``seed + i``."""
    return np.stack([generate_phantom(PhantomSpec(size, n_ellipses, seed=seed + i)) for i in range(n)])


def encode_dataset(images: Sequence[np.ndarray]) -> bytes:
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise DatasetError(f"dataset must be a stack of 2-D images, got shape {arr.shape}")
    n, h, w = arr.shape
    if max(n, h, w) > 0xFFFFFFFF:
        raise ShapeOverflowError(f"extents {arr.shape} do not fit in u32")
    return HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w) + arr.astype("<f4").tobytes()


def decode_dataset(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        if buf[:4] != DATASET_MAGIC[: len(buf[:4])]:
            raise BadMagicError("bad magic: not a KREC dataset")
        raise TruncatedFileError(f"truncated header: expected {HEADER.size} bytes, got {len(buf)}")
    magic, version, n, h, w = HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    expected = HEADER.size + 4 * n * h * w
    if len(buf) != expected:
        raise TruncatedFileError(f"dataset length mismatch: expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(n, h, w).astype(np.float32)


def dataset_file_length(n: int, h: int, w: int) -> int:
    return HEADER.size + 4 * n * h * w


def write_dataset(images: Sequence[np.ndarray], path) -> None:
    atomic_write_bytes(path, encode_dataset(images))


def read_dataset(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(img: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_pgm(img))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise DatasetError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
    return pixels.astype(np.float64) / maxval


def images_to_list(arr: np.ndarray) -> List[np.ndarray]:
    return [np.asarray(a) for a in arr]
