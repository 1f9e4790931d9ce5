"""DDPM machinery: schedule, forward noising, epsilon loss, clipped sampler.

Images live in ``[0, 1]``; the diffusion state lives in ``[-1, 1]`` via
``u = 2 x - 1``. Data consistency is applied in image space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from kanrecon import kspace
from kanrecon.mcmodel import ConditionEncoder, build_condition, noise_condition
from kanrecon.mfukan import UKanConfig, UKanModel
from kanrecon.ndtensor import nn
from kanrecon.ndtensor import tensor as F
from kanrecon.ndtensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep outside [0, {self.T})")
        return t


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ValueError(f"need at least two diffusion steps, got T={T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return DiffusionSchedule(betas, np.cumprod(1.0 - betas))


def schedule_from_betas(betas: Sequence[float]) -> DiffusionSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1 or np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must be a non-empty vector in (0, 1)")
    return DiffusionSchedule(betas, np.cumprod(1.0 - betas))


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    v = np.asarray(values[np.asarray(t)], dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def q_sample(x0, t, eps, sched: DiffusionSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` (batched ``t`` indexes axis 0)."""
    t = sched.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and noise {eps.shape} differ")
    ab = _coef(sched.alphas_cumprod, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t, eps, sched: DiffusionSchedule):
    ab = _coef(sched.alphas_cumprod, t, np.ndim(x_t))
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def posterior(x0, x_t, t: int, sched: DiffusionSchedule):
    """Mean and variance of ``q(x_{t-1} | x_t, x0)`` for scalar ``t >= 1``."""
    beta = sched.betas[t]
    ab = sched.alphas_cumprod[t]
    ab_prev = sched.alphas_cumprod[t - 1]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x_t, var


# ---------------------------------------------------------------------------
# clipping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipSchedule:
    omega: float = 0.02
    b: float = 1.5
    s_min: float = 1.0

    @classmethod
    def for_steps(cls, K: int, b: float = 1.5, s_min: float = 1.0) -> "ClipSchedule":
        """Falls linearly from ``b`` to ``s_min`` over the first half of ``K`` steps."""
        return cls(omega=(b - s_min) / (K / 2.0), b=b, s_min=s_min)

    @classmethod
    def fixed(cls) -> "ClipSchedule":
        return cls(omega=0.0, b=1.0, s_min=1.0)


def clip_threshold(k: int, clip: ClipSchedule) -> float:
    """``max(-omega * k + b, s_min)``; ``k`` counts completed reverse steps."""
    return max(-clip.omega * k + clip.b, clip.s_min)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class TCKanRecon(nn.Module):
    """MF-UKAN backbone plus the conditioning encoder."""

    def __init__(self, cfg: Optional[UKanConfig] = None, seed: int = 0):
        self.cfg = cfg = cfg or UKanConfig()
        self.backbone = UKanModel(cfg, seed=seed)
        self.encoder = ConditionEncoder(cfg, seed=seed + 1)

    def forward(self, x_t, t, obs, rng: np.random.Generator, schedule: DiffusionSchedule) -> Tensor:
        """Noise prediction for ``x_t`` (``(B, 1, H, W)``) given observed k-space ``obs``."""
        x_np = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        cond = build_condition(obs, x_np[:, 0])
        noised = noise_condition(cond, t, schedule, rng)
        feats = self.encoder(Tensor(noised), t)
        return self.backbone(x_t if isinstance(x_t, Tensor) else Tensor(x_np), t, feats)


def to_model_space(img):
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def to_image_space(u):
    return (np.asarray(u, dtype=np.float64) + 1.0) / 2.0


def training_loss(model, images, obs, seed, schedule: Optional[DiffusionSchedule] = None) -> Tensor:
    """Mean squared error between injected and predicted noise.

    ``model(x_t, t, obs, rng, schedule)`` must return a ``(B, 1, H, W)``
    tensor; ``images`` is ``(B, H, W)`` in ``[0, 1]``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError("training_loss needs a non-empty (B, H, W) batch")
    schedule = schedule or model.schedule
    rng = np.random.default_rng(seed)
    b = images.shape[0]
    t = rng.integers(0, schedule.T, size=b)
    eps = rng.standard_normal((b, 1) + images.shape[1:])
    x_t = q_sample(to_model_space(images)[:, None], t, eps, schedule)
    pred = model(Tensor(x_t), t, obs, rng, schedule)
    return F.mean(F.square(F.sub(pred, Tensor(eps))))


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

StepHook = Callable[[int, int, float, np.ndarray], None]


def sample_reconstruct(model, obs, mask: kspace.SamplingMask, sched: DiffusionSchedule,
                       clip: ClipSchedule, dc_every: int = 1, seed: int = 0,
                       on_step: Optional[StepHook] = None) -> np.ndarray:
    """Ancestral DDPM reconstruction of observed k-space ``obs``.

    Each step predicts the clean image, clamps it to ``[-s_k, s_k]``,
    enforces data consistency (every ``dc_every`` steps and at the last
    step) and draws the next state from the posterior. Images of a batch
    use independent generators seeded ``seed + i``.

    ``on_step(k, t, s_k, x0_image)`` receives the consistent clean-image
    estimate (image space) after each step.
    """
    if dc_every < 1:
        raise ValueError("dc_every must be >= 1")
    if clip.b < clip.s_min:
        raise ValueError(f"clip intercept b={clip.b} below floor s_min={clip.s_min}")
    obs = np.asarray(obs)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    b, h, w = obs.shape
    rngs = [np.random.default_rng(seed + i) for i in range(b)]
    x = np.stack([r.standard_normal((1, h, w)) for r in rngs])
    K = sched.T
    if isinstance(model, nn.Module):
        model.eval()
    for k in range(K):
        t = K - 1 - k
        tt = np.full(b, t)
        cond_rng = np.random.default_rng([seed, k])
        with no_grad():
            eps = model(Tensor(x), tt, obs, cond_rng, sched)
        eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
        s_k = clip_threshold(k, clip)
        x0 = np.clip(predict_x0(x, tt, eps, sched), -s_k, s_k)
        if k % dc_every == 0 or k == K - 1:
            img = kspace.data_consistency(to_image_space(x0[:, 0]), obs, mask)
            x0 = to_model_space(img)[:, None]
        if on_step is not None:
            on_step(k, t, s_k, to_image_space(x0[:, 0]))
        if t > 0:
            mean, var = posterior(x0, x, t, sched)
            z = np.stack([r.standard_normal((1, h, w)) for r in rngs])
            x = mean + np.sqrt(var) * z
        else:
            x = x0
    out = np.clip(to_image_space(x[:, 0]), 0.0, 1.0)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(model: TCKanRecon, images: np.ndarray, mask: kspace.SamplingMask,
          schedule: DiffusionSchedule, epochs: int, batch_size: int, lr: float, seed: int,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> list:
    """Adam on the epsilon loss; returns the mean loss of every epoch."""
    from kanrecon.ndtensor.optim import Adam
    from kanrecon.ndtensor.tensor import backward

    images = np.asarray(images, dtype=np.float64)
    obs_all = kspace.simulate_acquisition(images, mask)
    params = model.parameters()
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    curve = []
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = training_loss(model, images[idx], obs_all[idx], rng, schedule)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}")
            grads = backward(loss)
            opt.step({p: grads[p] for p in params if p in grads})
            opt.zero_grad()
            losses.append(float(loss.data))
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        logger.info("epoch %d loss %.6f", epoch + 1, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)
    model.eval()
    return curve
