"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def check_images(X, *, name: str = "X", min_size: int = 8) -> np.ndarray:
    """Return ``X`` as a float64 ``(n, H, W)`` stack of finite images.

    A single ``(H, W)`` image is promoted to a stack of one.
    """
    X = np.asarray(X)
    if X.dtype.kind == "c":
        raise ValueError(f"{name} must be real-valued images, got complex data")
    X = X.astype(np.float64, copy=False)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must be (n, H, W), got shape {X.shape}")
    n, h, w = X.shape
    if n == 0:
        raise ValueError(f"{name} is empty")
    if not (_pow2(h) and _pow2(w)) or min(h, w) < min_size:
        raise ValueError(f"{name} extents must be powers of two >= {min_size}, got {h}x{w}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinity")
    return X


def check_kspace(K, *, width: int = None, name: str = "K") -> np.ndarray:
    """Return ``K`` as a complex128 ``(n, H, W)`` stack of finite k-space grids."""
    K = np.asarray(K).astype(np.complex128, copy=False)
    if K.ndim == 2:
        K = K[None]
    if K.ndim != 3 or K.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty (n, H, W) stack, got shape {K.shape}")
    h, w = K.shape[1:]
    if not (_pow2(h) and _pow2(w)):
        raise ValueError(f"{name} extents must be powers of two, got {h}x{w}")
    if width is not None and w != width:
        raise ValueError(f"{name} width {w} does not match the fitted mask width {width}")
    if not np.isfinite(K).all():
        raise ValueError(f"{name} contains NaN or infinity")
    return K
