"""MF-UKAN noise-prediction backbone.

U-shaped network: three conv downsampling stages, a tokenized KAN bottleneck
with multi-head self-attention, and three upsampling stages. At every skip
merge the backbone features are amplified on half of their channels and the
skip features have their low frequencies attenuated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from kanrecon.kan import TokKanBlock, detokenize, tokenize
from kanrecon.ndtensor import nn
from kanrecon.ndtensor import tensor as F
from kanrecon.ndtensor.tensor import ShapeError, Tensor, as_tensor

PerStage = Union[float, Sequence[float]]


def _per_stage(value: PerStage, n: int) -> Tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),) * n
    value = tuple(float(v) for v in value)
    if len(value) != n:
        raise ValueError(f"expected {n} per-stage values, got {len(value)}")
    return value


@dataclass
class UKanConfig:
    in_channels: int = 1
    cond_channels: int = 2
    channels: Tuple[int, ...] = (16, 32, 64)
    patch_size: int = 1
    token_dim: int = 64
    heads: int = 4
    n_steps: int = 50
    b_l: PerStage = 1.2
    s_l: PerStage = 0.9
    r_thresh: PerStage = 0.25
    mf_enabled: bool = True
    use_tokkan: bool = True
    groups: int = 8

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3:
            raise ValueError("exactly three encoder stages are required")
        self.b_l = _per_stage(self.b_l, 3)
        self.s_l = _per_stage(self.s_l, 3)
        self.r_thresh = _per_stage(self.r_thresh, 3)
        if any(b < 1 for b in self.b_l):
            raise ValueError(f"b_l must be >= 1, got {self.b_l}")
        if any(not 0 < s <= 1 for s in self.s_l):
            raise ValueError(f"s_l must lie in (0, 1], got {self.s_l}")
        if any(not 0 <= r <= 1 for r in self.r_thresh):
            raise ValueError(f"r_thresh must lie in [0, 1], got {self.r_thresh}")
        if self.token_dim % self.heads:
            raise ValueError("token_dim must be divisible by heads")

    def replace(self, **changes) -> "UKanConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return UKanConfig(**values)


# ---------------------------------------------------------------------------
# scalar modulation
# ---------------------------------------------------------------------------

def _batched(x) -> Tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return F.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected a CHW or NCHW feature map, got {x.shape}")
    return x, False


def alpha_from_means(means, b_l: float) -> np.ndarray:
    """Min-max map of ``means`` onto ``[1, b_l]``; all ones if the means are equal."""
    means = np.asarray(means, dtype=np.float64)
    spread = means.max() - means.min()
    if spread == 0:
        return np.ones_like(means)
    return (b_l - 1.0) * (means - means.min()) / spread + 1.0


def backbone_alpha(x, b_l: float) -> Tensor:
    """Backbone factor map from the channel-averaged feature map.

    The channel mean at each position is min-max normalized over the
    spatial positions and mapped affinely onto ``[1, b_l]``. A constant
    mean map gives ``alpha = 1`` everywhere. Returns ``(B, 1, H, W)``
    (or ``(1, H, W)`` for an unbatched input).
    """
    xb, squeeze = _batched(x)
    avg = F.mean_channel(xb)
    hi = F.amax(avg, axis=(2, 3), keepdims=True)
    lo = F.amin(avg, axis=(2, 3), keepdims=True)
    spread = F.sub(hi, lo)
    flat = (spread.data == 0).astype(spread.data.dtype)
    norm = F.div(F.sub(avg, lo), F.add(spread, flat))
    alpha = F.add(F.mul(norm, float(b_l) - 1.0), 1.0)
    return F.reshape(alpha, alpha.shape[1:]) if squeeze else alpha


def scale_backbone(x, alpha) -> Tensor:
    """Multiply channels ``i < C // 2`` by ``alpha``; leave the rest untouched.

    ``alpha`` is either a spatial factor map broadcastable to one channel
    (as returned by :func:`backbone_alpha`) or a length-``C`` vector of
    per-channel factors.
    """
    xb, squeeze = _batched(x)
    alpha = as_tensor(alpha)
    c = xb.shape[1]
    half = c // 2
    if half == 0:
        return x if isinstance(x, Tensor) else xb
    if alpha.ndim == 1:
        if alpha.shape[0] != c:
            raise ShapeError(f"alpha has {alpha.shape[0]} entries for {c} channels")
        alpha = F.reshape(F.slice_axis(alpha, 0, 0, half), (1, half, 1, 1))
    elif squeeze and alpha.ndim == 3:
        alpha = F.reshape(alpha, (1,) + alpha.shape)
    head = F.mul(F.slice_channels(xb, 0, half), alpha)
    out = F.concat_channels([head, F.slice_channels(xb, half, c)])
    return F.reshape(out, out.shape[1:]) if squeeze else out


def radius_map(height: int, width: int) -> np.ndarray:
    """Normalized distance from the centered DC bin; 1 at the Nyquist corner."""
    fy = (np.arange(height) - height // 2) / max(height / 2, 0.5)
    fx = (np.arange(width) - width // 2) / max(width / 2, 0.5)
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2) / np.sqrt(2.0)


def skip_gain(height: int, width: int, s_l: float, r_thresh: float) -> np.ndarray:
    """Frequency gain (unshifted layout): ``s_l`` below ``r_thresh``, else 1."""
    beta = np.where(radius_map(height, width) < r_thresh, s_l, 1.0)
    return np.fft.ifftshift(beta)


def fourier_skip_modulate(h, s_l: float, r_thresh: float) -> Tensor:
    h = as_tensor(h)
    hh, ww = h.shape[-2:]
    for n in (hh, ww):
        if n & (n - 1):
            raise ValueError(f"spatial extents must be powers of two, got {hh}x{ww}")
    if not 0 < s_l <= 1:
        raise ValueError(f"s_l must lie in (0, 1], got {s_l}")
    return F.spectral_filter(h, skip_gain(hh, ww, s_l, r_thresh))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class ConvBlock(nn.Module):
    """conv3x3 -> BN -> ReLU."""

    def __init__(self, c_in: int, c_out: int, rng):
        self.conv = nn.Conv2d(c_in, c_out, rng)
        self.bn = nn.BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rng):
        self.heads = heads
        self.q = nn.Linear(dim, dim, rng)
        self.k = nn.Linear(dim, dim, rng)
        self.v = nn.Linear(dim, dim, rng)
        self.out = nn.Linear(dim, dim, rng, zero=True)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        x = F.reshape(x, (b, n, self.heads, d // self.heads))
        return F.transpose(x, (0, 2, 1, 3))

    def forward(self, z: Tensor) -> Tensor:
        b, n, d = z.shape
        q, k, v = self._split(self.q(z)), self._split(self.k(z)), self._split(self.v(z))
        scores = F.mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // self.heads))
        ctx = F.matmul(F.softmax(scores, axis=-1), v)
        ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return self.out(ctx)


class TokKanBottleneck(nn.Module):
    """Tokenize -> Tok-KAN -> attention -> Tok-KAN -> project back (residual)."""

    def __init__(self, channels: int, cfg: UKanConfig, rng, attention: bool = True):
        p, d = cfg.patch_size, cfg.token_dim
        self.patch = p
        self.channels = channels
        self.embed = nn.parameter(rng.uniform(-1, 1, (p * p * channels, d)) / np.sqrt(p * p * channels))
        self.block1 = TokKanBlock(d, cfg.n_steps, rng, use_kan=cfg.use_tokkan)
        self.attn = MultiHeadAttention(d, cfg.heads, rng) if attention else None
        self.block2 = TokKanBlock(d, cfg.n_steps, rng, use_kan=cfg.use_tokkan)
        self.unembed = nn.Linear(d, p * p * channels, rng, zero=True)

    def forward(self, x: Tensor, t) -> Tensor:
        b, c, h, w = x.shape
        z = tokenize(x, self.patch, self.embed)
        z = self.block1(z, t)
        if self.attn is not None:
            z = F.add(z, self.attn(z))
        z = self.block2(z, t)
        return F.add(x, detokenize(self.unembed(z), self.patch, c, h, w))


class DecoderStage(nn.Module):
    def __init__(self, c: int, c_out: int, rng):
        self.merge = ConvBlock(2 * c, c_out, rng)

    def forward(self, x: Tensor, skip: Tensor, cond: Optional[Tensor], mf: bool,
                b_l: float, s_l: float, r_thresh: float) -> Tensor:
        if cond is not None:
            if cond.shape != x.shape:
                raise ShapeError(f"conditioning feature {cond.shape} != decoder stage {x.shape}")
            x = F.add(x, cond)
        if mf:
            x = scale_backbone(x, backbone_alpha(x, b_l))
            skip = fourier_skip_modulate(skip, s_l, r_thresh)
        return F.upsample2(self.merge(F.concat_channels([x, skip])))


class UKanModel(nn.Module):
    def __init__(self, cfg: Optional[UKanConfig] = None, seed: int = 0):
        self.cfg = cfg = cfg or UKanConfig()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = cfg.channels
        self.enc = [ConvBlock(cfg.in_channels, c1, rng), ConvBlock(c1, c2, rng), ConvBlock(c2, c3, rng)]
        self.bottleneck = TokKanBottleneck(c3, cfg, rng)
        # decoder stages listed deepest first
        self.dec = [DecoderStage(c3, c2, rng), DecoderStage(c2, c1, rng), DecoderStage(c1, c1, rng)]
        self.head = ConvBlock(c1 + cfg.in_channels, c1, rng)
        self.out = nn.Conv2d(c1, cfg.in_channels, rng, zero=True)

    def stage_shapes(self, height: int, width: int) -> List[Tuple[int, int, int]]:
        """(C, H, W) of each encoder stage output, shallowest first."""
        return [(c, height >> (i + 1), width >> (i + 1)) for i, c in enumerate(self.cfg.channels)]

    def forward(self, x_t: Tensor, t, cond_feats: Optional[Sequence[Tensor]] = None) -> Tensor:
        cfg = self.cfg
        x_t, squeeze = _batched(x_t)
        b, c, h, w = x_t.shape
        if c != cfg.in_channels:
            raise ShapeError(f"model expects {cfg.in_channels} input channels, got {c}")
        if h % 8 or w % 8:
            raise ShapeError(f"spatial extents must be divisible by 8, got {h}x{w}")
        if cond_feats is not None and len(cond_feats) == 0:
            cond_feats = None
        if cond_feats is not None:
            if len(cond_feats) != 3:
                raise ShapeError(f"expected 3 conditioning stages, got {len(cond_feats)}")
            cond_feats = [_batched(f)[0] for f in cond_feats]

        skips = []
        y = x_t
        for block in self.enc:
            y = F.avgpool2(block(y))
            skips.append(y)
        y = self.bottleneck(y, t)
        for i, stage in enumerate(self.dec):
            level = 2 - i
            cond = cond_feats[level] if cond_feats is not None else None
            y = stage(y, skips[level], cond, cfg.mf_enabled,
                      cfg.b_l[level], cfg.s_l[level], cfg.r_thresh[level])
        y = self.out(self.head(F.concat_channels([y, x_t])))
        return F.reshape(y, y.shape[1:]) if squeeze else y


def ukan_forward(model: UKanModel, x_t, t, cond_feats=None) -> Tensor:
    return model(as_tensor(x_t), t, cond_feats)
