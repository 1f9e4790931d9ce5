import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kanrecon import kspace
from kanrecon.mfukan import (
    UKanConfig,
    UKanModel,
    alpha_from_means,
    backbone_alpha,
    fourier_skip_modulate,
    scale_backbone,
    ukan_forward,
)
from kanrecon.ndtensor.tensor import ShapeError, Tensor

maps = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.sampled_from([2, 4, 8]), st.sampled_from([2, 4, 8])),
                  elements=st.floats(-5, 5, allow_nan=False, width=64))


# -- backbone factor -----------------------------------------------------------

def test_alpha_example():
    assert np.array_equal(alpha_from_means([0.0, 1.0], 1.5), [1.0, 1.5])


def test_alpha_degenerate_and_unit_b():
    assert np.array_equal(alpha_from_means([0.3, 0.3, 0.3], 1.5), np.ones(3))
    assert np.array_equal(alpha_from_means([0.1, 0.7, -2.0], 1.0), np.ones(3))


def test_backbone_alpha_uses_channel_average():
    # channel means at the two positions are 0 and 1
    x = np.array([[[-1.0, 0.5]], [[1.0, 1.5]]])  # (C=2, H=1, W=2)
    assert np.array_equal(backbone_alpha(Tensor(x), 1.5).data, [[[1.0, 1.5]]])


@given(maps, st.floats(1.0, 3.0))
def test_backbone_alpha_matches_oracle_and_range(x, b):
    alpha = backbone_alpha(Tensor(x), b).data
    expect = alpha_from_means(x.mean(axis=0), b)
    assert np.allclose(alpha[0], expect, atol=1e-12)
    assert alpha.min() >= 1.0 - 1e-12 and alpha.max() <= b + 1e-12


def test_backbone_alpha_constant_map():
    assert np.array_equal(backbone_alpha(Tensor(np.full((3, 4, 4), 2.0)), 1.5).data, np.ones((1, 4, 4)))


# -- half-channel scaling ------------------------------------------------------

def test_scale_half_channels():
    out = scale_backbone(Tensor(np.ones((4, 2, 2))), np.array([2.0, 2.0, 2.0, 2.0])).data
    assert np.array_equal(out, np.array([2, 2, 1, 1], dtype=float).reshape(4, 1, 1) * np.ones((4, 2, 2)))


def test_scale_identity(rng):
    x = rng.standard_normal((5, 4, 4))
    assert np.array_equal(scale_backbone(Tensor(x), np.ones(5)).data, x)


@given(maps, st.integers(0, 2 ** 32 - 1))
def test_scale_coordinatewise(x, seed):
    c = x.shape[0]
    alpha = np.random.default_rng(seed).uniform(0.5, 2.0, c)
    out = scale_backbone(Tensor(x), alpha).data
    for i in range(c):
        if i < c // 2:
            assert np.array_equal(out[i], x[i] * alpha[i])
        else:
            assert np.array_equal(out[i], x[i])


def test_scale_with_spatial_map(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    a = rng.uniform(1, 1.5, (2, 1, 3, 3))
    out = scale_backbone(Tensor(x), Tensor(a)).data
    assert np.array_equal(out[:, :2], x[:, :2] * a)
    assert np.array_equal(out[:, 2:], x[:, 2:])


def test_scale_length_mismatch():
    with pytest.raises(ShapeError):
        scale_backbone(Tensor(np.ones((4, 2, 2))), np.ones(3))


# -- Fourier skip modulation ---------------------------------------------------

def fourier_oracle(h, s, r0):
    H, W = h.shape[-2:]
    i = (np.arange(H) - H // 2) / (H / 2)
    j = (np.arange(W) - W // 2) / (W / 2)
    r = np.sqrt(i[:, None] ** 2 + j[None, :] ** 2) / np.sqrt(2)
    beta = np.where(r < r0, s, 1.0)
    return kspace.ifft2(kspace.fft2(h) * beta).real


def test_skip_identity_cases(rng):
    h = rng.standard_normal((3, 8, 8))
    assert np.max(np.abs(fourier_skip_modulate(Tensor(h), 1.0, 0.5).data - h)) <= 1e-10
    assert np.max(np.abs(fourier_skip_modulate(Tensor(h), 0.3, 0.0).data - h)) <= 1e-10


def test_skip_halves_constant_image():
    h = np.full((2, 8, 8), 0.8)
    assert np.allclose(fourier_skip_modulate(Tensor(h), 0.5, 0.1).data, 0.5 * h, atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 1.0), st.floats(0.0, 1.0))
def test_skip_matches_oracle(seed, s, r0):
    h = np.random.default_rng(seed).standard_normal((2, 8, 16))
    assert np.allclose(fourier_skip_modulate(Tensor(h), s, r0).data, fourier_oracle(h, s, r0), atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.99), st.floats(0.01, 1.0))
def test_skip_scales_mean_by_s(seed, s, r0):
    h = np.random.default_rng(seed).standard_normal((3, 8, 8)) + 2.0
    out = fourier_skip_modulate(Tensor(h), s, r0).data
    assert np.allclose(out.mean(axis=(-2, -1)), s * h.mean(axis=(-2, -1)), atol=1e-12)


def test_skip_errors():
    with pytest.raises(ValueError):
        fourier_skip_modulate(Tensor(np.zeros((1, 6, 8))), 0.5, 0.2)
    with pytest.raises(ValueError):
        fourier_skip_modulate(Tensor(np.zeros((1, 8, 8))), 0.0, 0.2)


# -- full backbone -------------------------------------------------------------

def _cfg(**kw):
    base = dict(channels=(4, 8, 8), token_dim=8, heads=2, n_steps=10, groups=2)
    base.update(kw)
    return UKanConfig(**base)


def _perturb(model, seed=0):
    r = np.random.default_rng(seed)
    for p in model.parameters():
        if not np.any(p.data):
            p.data[...] = 0.1 * r.standard_normal(p.shape)
    return model


def test_mf_off_equals_unit_modulation(rng):
    x = Tensor(rng.standard_normal((2, 1, 16, 16)))
    a = _perturb(UKanModel(_cfg(mf_enabled=False), seed=1))
    b = _perturb(UKanModel(_cfg(mf_enabled=True, b_l=1.0, s_l=1.0), seed=1))
    assert np.max(np.abs(a(x, np.array([2, 5])).data - b(x, np.array([2, 5])).data)) <= 1e-10


@pytest.mark.parametrize("size", [32, 64])
def test_output_shape_matches_input(size, rng):
    model = UKanModel(_cfg(), seed=0)
    x = rng.standard_normal((1, size, size))
    assert ukan_forward(model, x, 3).shape == (1, size, size)


def test_deterministic(rng):
    model = _perturb(UKanModel(_cfg(), seed=0))
    x = Tensor(rng.standard_normal((2, 1, 16, 16)))
    assert np.array_equal(model(x, np.array([1, 2])).data, model(x, np.array([1, 2])).data)


def test_zero_conditioning_equals_unconditioned(rng):
    model = _perturb(UKanModel(_cfg(), seed=0))
    x = Tensor(rng.standard_normal((2, 1, 16, 16)))
    zeros = [Tensor(np.zeros((2,) + s)) for s in model.stage_shapes(16, 16)]
    assert np.array_equal(model(x, 4, zeros).data, model(x, 4).data)


def test_backbone_errors(rng):
    model = UKanModel(_cfg(), seed=0)
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 12, 12))), 0)
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 16, 16))), 0, [Tensor(np.zeros((1, 4, 8, 8)))])
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 16, 16))), 0, [Tensor(np.zeros((1, 4, 4, 4)))] * 3)


def test_config_validation():
    with pytest.raises(ValueError):
        UKanConfig(b_l=0.9)
    with pytest.raises(ValueError):
        UKanConfig(s_l=1.5)
    with pytest.raises(ValueError):
        UKanConfig(token_dim=10, heads=4)
    assert UKanConfig(b_l=[1.1, 1.2, 1.3]).b_l == (1.1, 1.2, 1.3)
