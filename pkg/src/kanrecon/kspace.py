"""Simulated single-coil Cartesian acquisition.

Images are real 2-D arrays; k-space grids are complex arrays with the DC bin
at ``(H // 2, W // 2)``. Transforms are orthonormal so energy is preserved.
Undersampling masks select whole phase-encode columns.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from kanrecon.ndtensor.checkpoint import atomic_write_bytes

DEFAULT_CENTER_FRACTIONS = {4: 0.08, 6: 0.06, 8: 0.04, 10: 0.04}


class MaskError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _check_grid(a: np.ndarray) -> None:
    if a.ndim < 2:
        raise ValueError(f"expected a 2-D grid, got shape {a.shape}")
    h, w = a.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"grid extents must be powers of two, got {h}x{w}")


def fft2(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D DFT over the last two axes."""
    img = np.asarray(img)
    _check_grid(img)
    return np.fft.fftshift(np.fft.fft2(img, norm="ortho"), axes=(-2, -1))


def ifft2(kspace: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`; returns a complex array."""
    kspace = np.asarray(kspace)
    _check_grid(kspace)
    return np.fft.ifft2(np.fft.ifftshift(kspace, axes=(-2, -1)), norm="ortho")


@dataclass(frozen=True)
class SamplingMask:
    columns: np.ndarray
    accel_factor: int
    center_fraction: float
    seed: int = 0

    @property
    def width(self) -> int:
        return int(self.columns.shape[0])

    def as_grid(self, height: int) -> np.ndarray:
        return np.broadcast_to(self.columns[None, :], (height, self.width))

    def apply(self, kspace: np.ndarray) -> np.ndarray:
        return undersample(kspace, self)

    def save(self, path) -> None:
        text = (
            f"{self.width} {self.accel_factor} {self.center_fraction!r} {self.seed}\n"
            + "\n".join("1" if c else "0" for c in self.columns)
            + "\n"
        )
        atomic_write_bytes(path, text.encode("ascii"))

    @classmethod
    def load(cls, path) -> "SamplingMask":
        lines = Path(path).read_text().split()
        width, accel, cf, seed = int(lines[0]), int(lines[1]), float(lines[2]), int(lines[3])
        cols = np.array([tok == "1" for tok in lines[4:]], dtype=bool)
        if cols.shape[0] != width:
            raise MaskError(f"mask file lists {cols.shape[0]} columns, header says {width}")
        return cls(cols, accel, cf, seed)


def center_columns(width: int, center_fraction: float) -> np.ndarray:
    """Indices of the ``round(center_fraction * width)`` middle columns."""
    n_low = int(round(center_fraction * width))
    pad = (width - n_low + 1) // 2
    return np.arange(pad, pad + n_low)


def mirror_columns(idx: np.ndarray, width: int) -> np.ndarray:
    """Column index of the negated frequency (DC at ``width // 2``)."""
    return (width - idx) % width


def make_mask(width: int, accel: int, center_fraction: Optional[float] = None,
              seed: int = 0) -> SamplingMask:
    """Random column mask in the fastMRI style, closed under frequency negation.

    The central band is always sampled. Every other column is sampled
    together with its mirror image so the masked spectrum of a real image
    stays Hermitian; the per-column probability is chosen so the expected
    number of sampled columns equals ``width / accel``.
    """
    if accel < 1:
        raise MaskError(f"acceleration must be a positive integer, got {accel}")
    if center_fraction is None:
        center_fraction = DEFAULT_CENTER_FRACTIONS.get(accel, 0.04)
    if not 0.0 < center_fraction < 1.0:
        raise MaskError(f"center_fraction must lie in (0, 1), got {center_fraction}")
    cols = np.zeros(width, dtype=bool)
    low = center_columns(width, center_fraction)
    cols[low] = True
    cols[mirror_columns(low, width)] = True
    n_fixed = int(cols.sum())
    budget = width / accel
    if n_fixed > budget + 1e-12:
        raise MaskError(
            f"infeasible mask: {n_fixed} center columns exceed the budget of {budget:g} "
            f"for width {width} at acceleration {accel}"
        )
    free = width - n_fixed
    prob = 0.0 if free == 0 else (budget - n_fixed) / free
    rng = np.random.default_rng(seed)
    draws = rng.uniform(size=width) < prob
    for j in range(width):
        if cols[j]:
            continue
        partner = mirror_columns(np.array(j), width)
        # one draw per mirror pair, taken from the lower index
        take = draws[min(j, int(partner))]
        cols[j] = take
    return SamplingMask(cols, int(accel), float(center_fraction), int(seed))


def undersample(full: np.ndarray, mask: SamplingMask) -> np.ndarray:
    full = np.asarray(full)
    if full.shape[-1] != mask.width:
        raise MaskError(f"k-space width {full.shape[-1]} does not match mask width {mask.width}")
    return np.where(mask.columns, full, 0.0).astype(np.complex128)


def normalize_magnitude(img: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    """Divide by the given percentile (per image over the last two axes)."""
    mag = np.asarray(img, dtype=np.float64)
    scale = np.percentile(mag, percentile, axis=(-2, -1), keepdims=True)
    return np.divide(mag, scale, out=np.zeros_like(mag), where=scale > 0)


def zero_fill(obs: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Zero-filled reconstruction: ``|ifft2(obs)|`` scaled by its 99th percentile.

    With ``clamp=False`` the normalized magnitude is returned before the
    final clip to ``[0, 1]``.
    """
    out = normalize_magnitude(np.abs(ifft2(obs)))
    return np.clip(out, 0.0, 1.0) if clamp else out


def data_consistency(candidate: np.ndarray, obs: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Replace the candidate's spectrum by ``obs`` on sampled columns.

    Returns the real part of the merged image.
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    obs = np.asarray(obs)
    if candidate.shape[-2:] != obs.shape[-2:]:
        raise ValueError(f"candidate {candidate.shape} and obs {obs.shape} differ in extent")
    if obs.shape[-1] != mask.width:
        raise MaskError(f"obs width {obs.shape[-1]} does not match mask width {mask.width}")
    merged = np.where(mask.columns, obs, fft2(candidate))
    return ifft2(merged).real


def simulate_acquisition(images: np.ndarray, mask: SamplingMask) -> np.ndarray:
    return undersample(fft2(images), mask)


def write_mask(mask: SamplingMask, path: os.PathLike) -> None:
    mask.save(path)


def read_mask(path: os.PathLike) -> SamplingMask:
    return SamplingMask.load(path)
