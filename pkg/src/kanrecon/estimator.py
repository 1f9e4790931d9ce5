"""scikit-learn style front end.

``fit`` takes clean images, ``predict`` takes observed k-space, and
``transform`` goes from clean images through simulated acquisition to a
reconstruction so the estimators compose with ``fit_transform`` and
``score``.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from kanrecon import kspace, metrics
from kanrecon._validation import check_images, check_kspace
from kanrecon.config import RunConfig
from kanrecon.diffusion import ClipSchedule, TCKanRecon, make_schedule, sample_reconstruct, train
from kanrecon.mfukan import UKanConfig

logger = logging.getLogger(__name__)


class _MaskedReconstructor(BaseEstimator, TransformerMixin):
    def _build_mask(self, width: int) -> kspace.SamplingMask:
        return kspace.make_mask(width, self.accel, self.center_fraction, self.mask_seed)

    def acquire(self, X) -> np.ndarray:
        """Simulate undersampled acquisition of clean images with the fitted mask."""
        check_is_fitted(self, "mask_")
        X = check_images(X)
        return kspace.simulate_acquisition(X, self.mask_)

    def transform(self, X) -> np.ndarray:
        return self.predict(self.acquire(X))

    def score(self, X, y=None) -> float:
        """Mean PSNR (dB) of ``transform(X)`` against ``X``."""
        X = check_images(X)
        rec = self.transform(X)
        return float(np.mean([metrics.psnr(a, b) for a, b in zip(X, rec)]))


class ZeroFilledReconstructor(_MaskedReconstructor):
    """Baseline: magnitude of the inverse transform of the observed k-space."""

    def __init__(self, accel: int = 4, center_fraction: Optional[float] = None, mask_seed: int = 0):
        self.accel = accel
        self.center_fraction = center_fraction
        self.mask_seed = mask_seed

    def fit(self, X, y=None):
        X = check_images(X)
        self.mask_ = self._build_mask(X.shape[-1])
        self.n_features_in_ = X.shape[-1]
        return self

    def predict(self, K) -> np.ndarray:
        check_is_fitted(self, "mask_")
        K = check_kspace(K, width=self.mask_.width)
        return kspace.zero_fill(K)


class KanReconstructor(_MaskedReconstructor):
    """Conditional diffusion reconstructor with a KAN-bottleneck U-Net denoiser.

    Parameters mirror the JSON run configuration; see
    :meth:`from_config`. ``random_state`` seeds weight initialization,
    training order and the sampler.
    """

    def __init__(self, accel: int = 4, center_fraction: Optional[float] = 0.08, mask_seed: int = 0,
                 channels=(16, 32, 64), patch_size: int = 1, token_dim: int = 64, heads: int = 4,
                 b_l=1.2, s_l=0.9, r_thresh=0.25, mf_enabled: bool = True, use_tokkan: bool = True,
                 n_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02,
                 clip_omega: float = 0.02, clip_b: float = 1.5, clip_s_min: float = 1.0,
                 dynamic_clip: bool = True, dc_every: int = 1,
                 epochs: int = 120, batch_size: int = 8, lr: float = 1e-3, random_state: int = 0):
        self.accel = accel
        self.center_fraction = center_fraction
        self.mask_seed = mask_seed
        self.channels = channels
        self.patch_size = patch_size
        self.token_dim = token_dim
        self.heads = heads
        self.b_l = b_l
        self.s_l = s_l
        self.r_thresh = r_thresh
        self.mf_enabled = mf_enabled
        self.use_tokkan = use_tokkan
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.clip_omega = clip_omega
        self.clip_b = clip_b
        self.clip_s_min = clip_s_min
        self.dynamic_clip = dynamic_clip
        self.dc_every = dc_every
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: RunConfig, seed: Optional[int] = None) -> "KanReconstructor":
        m, d, ab = cfg.model, cfg.diffusion, cfg.ablation
        return cls(
            accel=cfg.mask.accel, center_fraction=cfg.mask.center_fraction, mask_seed=cfg.mask.seed,
            channels=tuple(m.channels), patch_size=m.patch_size, token_dim=m.token_dim, heads=m.heads,
            b_l=m.b_l, s_l=m.s_l, r_thresh=m.r_thresh,
            mf_enabled=m.mf_enabled and ab.mf, use_tokkan=ab.tokkan,
            n_steps=d.T, beta_start=d.beta_start, beta_end=d.beta_end,
            clip_omega=d.clip.omega, clip_b=d.clip.b, clip_s_min=d.clip.s_min,
            dynamic_clip=ab.dynamic_clip, dc_every=d.dc_every,
            epochs=cfg.train.epochs, batch_size=cfg.train.batch, lr=cfg.train.lr,
            random_state=cfg.train.seed if seed is None else seed,
        )

    # -- construction ------------------------------------------------------

    def ukan_config(self) -> UKanConfig:
        return UKanConfig(
            channels=tuple(self.channels), patch_size=self.patch_size, token_dim=self.token_dim,
            heads=self.heads, n_steps=self.n_steps, b_l=self.b_l, s_l=self.s_l,
            r_thresh=self.r_thresh, mf_enabled=self.mf_enabled, use_tokkan=self.use_tokkan,
        )

    def clip_schedule(self) -> ClipSchedule:
        if not self.dynamic_clip:
            return ClipSchedule.fixed()
        return ClipSchedule(omega=self.clip_omega, b=self.clip_b, s_min=self.clip_s_min)

    def initialize(self, width: int) -> "KanReconstructor":
        """Build mask, schedule and a freshly initialized model without training."""
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs and batch_size must be >= 1 and lr positive")
        if self.dc_every < 1:
            raise ValueError("dc_every must be >= 1")
        self.mask_ = self._build_mask(width)
        self.schedule_ = make_schedule(self.n_steps, self.beta_start, self.beta_end)
        self.clip_ = self.clip_schedule()
        if self.clip_.b < self.clip_.s_min:
            raise ValueError(f"clip intercept b={self.clip_.b} below floor s_min={self.clip_.s_min}")
        self.model_ = TCKanRecon(self.ukan_config(), seed=self.random_state)
        self.n_features_in_ = width
        return self

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None, on_epoch: Optional[Callable[[int, float], None]] = None):
        X = check_images(X)
        self.initialize(X.shape[-1])
        self.loss_curve_ = train(self.model_, X, self.mask_, self.schedule_, self.epochs,
                                 self.batch_size, self.lr, self.random_state, on_epoch=on_epoch)
        return self

    def predict(self, K, on_step=None) -> np.ndarray:
        """Reconstruct images in ``[0, 1]`` from observed k-space ``(n, H, W)``.

        ``on_step(i, k, t, s_k, x0)`` is called for image ``i`` after each
        reverse step.
        """
        check_is_fitted(self, "model_")
        K = check_kspace(K, width=self.mask_.width)
        out = np.empty(K.shape, dtype=np.float64)
        for i, obs in enumerate(K):
            hook = None
            if on_step is not None:
                hook = lambda k, t, s, x0, i=i: on_step(i, k, t, s, x0)
            out[i] = sample_reconstruct(self.model_, obs, self.mask_, self.schedule_, self.clip_,
                                        dc_every=self.dc_every, seed=self.random_state + i,
                                        on_step=hook)
        return out

    def state_dict(self):
        check_is_fitted(self, "model_")
        return self.model_.state_dict()

    def load_state_dict(self, state, width: int) -> "KanReconstructor":
        """Initialize for ``width`` and load trained weights."""
        self.initialize(width)
        self.model_.load_state_dict(state)
        self.model_.eval()
        return self
