"""Conditioning path: observed k-space + current image -> decoder features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from kanrecon import kspace
from kanrecon.mfukan import TokKanBottleneck, UKanConfig
from kanrecon.ndtensor import nn
from kanrecon.ndtensor import tensor as F
from kanrecon.ndtensor.tensor import ShapeError, Tensor, as_tensor

Seed = Union[int, np.random.Generator]


@dataclass
class ConditionInput:
    obs_image: np.ndarray
    x: np.ndarray
    x_tilde: np.ndarray


def build_condition(obs: np.ndarray, x: np.ndarray) -> ConditionInput:
    """Stack ``real(ifft2(obs))`` and ``x`` as two channels.

    Accepts single grids ``(H, W)`` or batches ``(B, H, W)``; ``x_tilde`` is
    ``(2, H, W)`` or ``(B, 2, H, W)`` accordingly.
    """
    obs = np.asarray(obs)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == obs.ndim + 1 and x.shape[-3] == 1:
        x = x[..., 0, :, :]
    if obs.shape != x.shape:
        raise ShapeError(f"observed k-space {obs.shape} and image {x.shape} differ")
    obs_image = kspace.ifft2(obs).real
    x_tilde = np.stack([obs_image, x], axis=-3)
    return ConditionInput(obs_image, x, x_tilde)


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def noise_condition(cond: Union[ConditionInput, np.ndarray], t, schedule, seed: Seed) -> np.ndarray:
    """Forward-noise the stacked condition to the same level as the backbone input."""
    x_tilde = cond.x_tilde if isinstance(cond, ConditionInput) else np.asarray(cond)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T})")
    ab = schedule.alphas_cumprod[t]
    if x_tilde.ndim == 4:
        ab = np.broadcast_to(ab, (x_tilde.shape[0],)).reshape(-1, 1, 1, 1)
    eps = _rng(seed).standard_normal(x_tilde.shape)
    return np.sqrt(ab) * x_tilde + np.sqrt(1.0 - ab) * eps


class EncoderBlock(nn.Module):
    """conv3x3 -> ReLU -> GroupNorm, then 2x average pooling."""

    def __init__(self, c_in: int, c_out: int, groups: int, rng):
        self.conv = nn.Conv2d(c_in, c_out, rng)
        self.norm = nn.GroupNorm(groups, c_out, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.avgpool2(self.norm(F.relu(self.conv(x))))


class ConditionEncoder(nn.Module):
    """Three encoder blocks and a two-block Tok-KAN bottleneck.

    Records every stage output; the bottleneck refines the deepest one.
    """

    def __init__(self, cfg: Optional[UKanConfig] = None, seed: int = 1):
        self.cfg = cfg = cfg or UKanConfig()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = cfg.channels
        self.blocks = [
            EncoderBlock(cfg.cond_channels, c1, cfg.groups, rng),
            EncoderBlock(c1, c2, cfg.groups, rng),
            EncoderBlock(c2, c3, cfg.groups, rng),
        ]
        self.bottleneck = TokKanBottleneck(c3, cfg, rng, attention=False)

    def forward(self, x_tilde_noised, t) -> List[Tensor]:
        x = as_tensor(x_tilde_noised)
        squeeze = x.ndim == 3
        if squeeze:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.cfg.cond_channels:
            raise ShapeError(f"condition must be (B, {self.cfg.cond_channels}, H, W), got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ShapeError(f"spatial extents must be divisible by 8, got {x.shape[2:]}")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        feats[-1] = self.bottleneck(feats[-1], t)
        if squeeze:
            feats = [F.reshape(f, f.shape[1:]) for f in feats]
        return feats


def condition_encode(x_tilde_noised, params: ConditionEncoder, t=0) -> List[Tensor]:
    return params(x_tilde_noised, t)
