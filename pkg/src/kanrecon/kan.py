"""Kolmogorov-Arnold layers and the tokenized KAN block.

A KAN layer puts a learnable univariate function on every edge::

    out_q = sum_p  w_b[q,p] * silu(z_p) + w_s[q,p] * sum_i c[q,p,i] * B_i(z_p)

with cubic B-spline bases ``B_i`` on a uniform grid over ``[-1, 1]``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from kanrecon.ndtensor import nn
from kanrecon.ndtensor import tensor as F
from kanrecon.ndtensor.tensor import ShapeError, Tensor

GRID_SIZE = 8
SPLINE_ORDER = 3
TIME_EMBED_DIM = 64


def uniform_grid(grid_size: int = GRID_SIZE, order: int = SPLINE_ORDER,
                 lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Knots ``lo + h*j`` for ``j = -order .. grid_size + order``."""
    h = (hi - lo) / grid_size
    return lo + h * np.arange(-order, grid_size + order + 1, dtype=np.float64)


def _check_grid(grid: np.ndarray, order: int) -> None:
    if order < 1:
        raise ValueError(f"spline order must be >= 1, got {order}")
    if grid.ndim != 1 or grid.size < order + 2:
        raise ValueError("grid needs at least order + 2 knots")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("degenerate grid: knots must be strictly increasing")


def bspline_basis_with_derivative(x, grid: np.ndarray, order: int):
    """Cox-de Boor basis values and their derivatives along a new last axis.

    ``x`` is clamped to ``[grid[order], grid[-order-1]]`` first.
    """
    grid = np.asarray(grid, dtype=np.float64)
    _check_grid(grid, order)
    lo, hi = grid[order], grid[-order - 1]
    x = np.clip(np.asarray(x, dtype=np.float64), lo, np.nextafter(hi, lo))[..., None]
    t = grid
    basis = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    deriv = np.zeros_like(basis)
    for p in range(1, order + 1):
        left_den = t[p:-1] - t[: -(p + 1)]
        right_den = t[p + 1:] - t[1:-p]
        lower_l = basis[..., :-1]
        lower_r = basis[..., 1:]
        if p == order:
            deriv = p * (lower_l / left_den - lower_r / right_den)
        basis = (x - t[: -(p + 1)]) / left_den * lower_l + (t[p + 1:] - x) / right_den * lower_r
    return basis, deriv


def bspline_basis(x, grid: np.ndarray, order: int) -> np.ndarray:
    return bspline_basis_with_derivative(x, grid, order)[0]


class KanLayer(nn.Module):
    """``n_in -> n_out`` KAN layer; weights are stored row-major as ``[out, in]``."""

    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None,
                 grid_size: int = GRID_SIZE, order: int = SPLINE_ORDER):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.order = order
        self.grid = uniform_grid(grid_size, order)
        n_basis = grid_size + order
        bound = 1.0 / np.sqrt(n_in)
        self.base_weight = nn.parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.spline_weight = nn.parameter(np.ones((n_out, n_in)))
        self.coeffs = nn.parameter(np.zeros((n_out, n_in, n_basis)))

    @property
    def n_basis(self) -> int:
        return self.coeffs.shape[-1]

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.n_in:
            raise ShapeError(f"KAN layer expects {self.n_in} inputs, got {z.shape[-1]}")
        base = F.matmul(F.silu(z), F.transpose(self.base_weight))
        basis = F.bspline(z, self.grid, self.order)
        basis = F.reshape(basis, z.shape[:-1] + (self.n_in * self.n_basis,))
        w = F.mul(F.reshape(self.spline_weight, (self.n_out, self.n_in, 1)), self.coeffs)
        w = F.reshape(w, (self.n_out, self.n_in * self.n_basis))
        return F.add(base, F.matmul(basis, F.transpose(w)))

    def edge(self, q: int, p: int, x) -> np.ndarray:
        """Evaluate the single edge function phi_{q,p} on plain numbers."""
        x = np.asarray(x, dtype=np.float64)
        b = bspline_basis(x, self.grid, self.order)
        s = x / (1.0 + np.exp(-x))
        return self.base_weight.data[q, p] * s + self.spline_weight.data[q, p] * (b @ self.coeffs.data[q, p])


def kan_layer_forward(z: Tensor, params: KanLayer) -> Tensor:
    return params(z)


class Kan(nn.Module):
    """Composition ``Phi_{k-1} o ... o Phi_0`` of KAN layers."""

    def __init__(self, widths: Sequence[int], rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [KanLayer(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, z: Tensor) -> Tensor:
        for layer in self.layers:
            z = layer(z)
        return z


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

def tokenize(x: Tensor, patch: int, projection: Optional[Tensor] = None) -> Tensor:
    """Split NCHW maps into ``P x P`` patches, flatten each as (row, col, channel).

    Returns ``(B, N, P*P*C)`` tokens, multiplied by ``projection`` when given.
    """
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide {h}x{w}")
    t = F.reshape(x, (b, c, h // patch, patch, w // patch, patch))
    t = F.transpose(t, (0, 2, 4, 3, 5, 1))
    t = F.reshape(t, (b, (h // patch) * (w // patch), patch * patch * c))
    return F.matmul(t, projection) if projection is not None else t


def detokenize(tokens: Tensor, patch: int, channels: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`tokenize` with an identity projection."""
    b, n, d = tokens.shape
    if d != patch * patch * channels or n * patch * patch != height * width:
        raise ShapeError(f"tokens {tokens.shape} do not tile a {channels}x{height}x{width} map")
    t = F.reshape(tokens, (b, height // patch, width // patch, patch, patch, channels))
    t = F.transpose(t, (0, 5, 1, 3, 2, 4))
    return F.reshape(t, (b, channels, height, width))


def timestep_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding, ``[sin(t*f_j), cos(t*f_j)]`` with geometric ``f_j``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def mlp_hidden_width(dim: int, n_basis: int, n_layers: int = 3) -> int:
    """Hidden width making a ``dim -> h -> h -> dim`` MLP match a KAN stack's size."""
    target = n_layers * dim * dim * (n_basis + 2)
    # h^2 + (2*dim + 2) h + dim - target = 0
    bq = 2 * dim + 2
    return max(1, int(round((-bq + np.sqrt(bq * bq - 4 * (dim - target))) / 2)))


class TokKanBlock(nn.Module):
    """``Z_k = LN(KAN(Z_{k-1})) + F(TE(t))`` with three (KAN, BN, ReLU) stages.

    With ``use_kan=False`` the KAN layers become linear layers whose total
    parameter count matches the KAN stack (ablation).
    """

    def __init__(self, dim: int, n_steps: int, rng: Optional[np.random.Generator] = None,
                 use_kan: bool = True, time_dim: int = TIME_EMBED_DIM):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.n_steps = n_steps
        self.time_dim = time_dim
        self.use_kan = use_kan
        if use_kan:
            widths = [dim, dim, dim, dim]
            self.layers = [KanLayer(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        else:
            h = mlp_hidden_width(dim, GRID_SIZE + SPLINE_ORDER)
            widths = [dim, h, h, dim]
            self.layers = [nn.Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [nn.BatchNorm(wd, axis=-1) for wd in widths[1:]]
        self.ln = nn.LayerNorm(dim)
        self.time_proj = nn.Linear(time_dim, dim, rng, bias=False)

    def kan_path(self, z: Tensor) -> Tensor:
        for layer, bn in zip(self.layers, self.norms):
            z = F.relu(bn(layer(z)))
        return z

    def time_term(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        if np.any(t < 0) or np.any(t >= self.n_steps):
            raise ValueError(f"timestep outside [0, {self.n_steps})")
        emb = Tensor(timestep_embedding(t, self.time_dim))
        return F.reshape(self.time_proj(emb), (t.shape[0], 1, self.dim))

    def forward(self, z: Tensor, t) -> Tensor:
        if z.ndim != 3 or z.shape[-1] != self.dim:
            raise ShapeError(f"Tok-KAN block expects (B, N, {self.dim}) tokens, got {z.shape}")
        return F.add(self.ln(self.kan_path(z)), self.time_term(t))


def tokkan_block(z_prev: Tensor, t, params: TokKanBlock) -> Tensor:
    return params(z_prev, t)
