import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctscal.errors import DomainError, InputError
from ctscal.features import (EPS, StyleStats, content_noise, content_swap, decompose, recompose,
                             style_of, style_swap)
from ctscal.numerics import make_rng


def spatial_stats(z):
    return z.mean(axis=(-2, -1)), z.std(axis=(-2, -1))


def random_feature(seed, shape=(4, 5, 6), min_std=0.1):
    r = make_rng(seed)
    scale = r.uniform(min_std * 2, 2.0, size=shape[0])[:, None, None]
    shift = r.normal(0, 3, size=shape[0])[:, None, None]
    return shift + scale * r.normal(size=shape)


def test_constant_channel():
    s, c = decompose(np.full((1, 3, 3), 5.0))
    assert s.mu.tolist() == [5.0]
    assert s.sigma.tolist() == [EPS]
    assert np.all(c == 0.0)


def test_two_pixel_example():
    z = np.array([[[1.0, 3.0]]])
    s, c = decompose(z)
    sigma = np.sqrt(1.0 + EPS ** 2)
    assert s.mu.tolist() == [2.0]
    assert s.sigma[0] == pytest.approx(sigma, abs=1e-15)
    np.testing.assert_allclose(c[0, 0], [-1 / sigma, 1 / sigma], atol=1e-15)
    np.testing.assert_allclose(c[0, 0], [-1, 1], atol=1e-9)


def test_single_pixel_rejected():
    with pytest.raises(DomainError):
        decompose(np.ones((2, 1, 1)))


def test_nonfinite_rejected():
    with pytest.raises(InputError):
        decompose(np.array([[[1.0, np.nan]]]))


@given(st.integers(0, 10**6))
def test_round_trip(seed):
    z = random_feature(seed)
    s, c = decompose(z)
    np.testing.assert_allclose(recompose(s, c), z, rtol=0, atol=1e-6)


@given(st.integers(0, 10**6))
def test_content_is_normalised(seed):
    _, c = decompose(random_feature(seed, min_std=0.0))
    m, sd = spatial_stats(c)
    assert np.all(np.abs(m) <= 1e-6)
    assert np.all((sd >= 1 - 1e-3) & (sd <= 1.0))


def test_identity_style():
    c = make_rng(1).normal(size=(2, 3, 3))
    out = recompose(StyleStats(np.zeros(2), np.ones(2)), c)
    np.testing.assert_array_equal(out, c)


def test_recompose_shape_mismatch():
    with pytest.raises(InputError):
        recompose(StyleStats(np.zeros(3), np.ones(3)), np.zeros((2, 3, 3)))


def test_foreign_style_statistics():
    zi, zj = random_feature(1), random_feature(2)
    out = recompose(style_of(zj), decompose(zi)[1])
    m, sd = spatial_stats(out)
    mj, sdj = spatial_stats(zj)
    np.testing.assert_allclose(m, mj, atol=1e-5)
    np.testing.assert_allclose(sd, sdj, atol=1e-5)


@given(st.integers(0, 10**6))
def test_self_swaps(seed):
    z = random_feature(seed)
    np.testing.assert_allclose(style_swap(z, z), z, atol=1e-6)
    np.testing.assert_allclose(content_swap(z, z), z, atol=1e-6)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_swap_provenance(a, b):
    zi, zj = random_feature(a), random_feature(b + 10**7)
    out = style_swap(zi, zj)
    s_out, c_out = decompose(out)
    np.testing.assert_allclose(s_out.mu, spatial_stats(zj)[0], atol=1e-5)
    np.testing.assert_allclose(s_out.sigma, style_of(zj).sigma, atol=1e-5)
    np.testing.assert_allclose(c_out, decompose(zi)[1], atol=1e-5)

    out = content_swap(zi, zj)
    s_out, c_out = decompose(out)
    np.testing.assert_allclose(s_out.mu, style_of(zi).mu, atol=1e-5)
    np.testing.assert_allclose(s_out.sigma, style_of(zi).sigma, atol=1e-5)
    np.testing.assert_allclose(c_out, decompose(zj)[1], atol=1e-5)


def test_style_round_trip():
    zi, zj = random_feature(3), random_feature(4)
    np.testing.assert_allclose(style_swap(style_swap(zi, zj), zi), zi, atol=1e-5)


def test_content_swap_is_reversed_style_swap():
    zi, zj = random_feature(5), random_feature(6)
    assert np.array_equal(content_swap(zi, zj), style_swap(zj, zi))


def test_swap_shape_mismatch():
    with pytest.raises(InputError):
        style_swap(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))
    with pytest.raises(InputError):
        content_swap(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


def test_batched_swap_matches_per_sample():
    zs = np.stack([random_feature(i) for i in range(4)])
    donors = zs[[1, 2, 3, 0]]
    batched = style_swap(zs, donors)
    for i in range(4):
        np.testing.assert_allclose(batched[i], style_swap(zs[i], donors[i]), atol=1e-12)


def test_content_noise_zero_variance():
    z = random_feature(7)
    np.testing.assert_allclose(content_noise(z, 0.0, make_rng(0)), z, atol=1e-6)


def test_content_noise_negative():
    with pytest.raises(DomainError):
        content_noise(random_feature(7), -0.1, make_rng(0))


def test_content_noise_keeps_mean():
    # per-channel mean of the output is mu + sigma * mean(noise); the noise
    # mean over H*W pixels has std sqrt(v / HW)
    z = random_feature(8, shape=(3, 32, 32))
    s = style_of(z)
    out = content_noise(z, 0.1, make_rng(1))
    tol = 3 * s.sigma * np.sqrt(0.1 / (32 * 32))
    assert np.all(np.abs(out.mean(axis=(1, 2)) - s.mu) <= tol)


def test_content_noise_deterministic():
    z = random_feature(9)
    a = content_noise(z, 0.2, make_rng(4))
    b = content_noise(z, 0.2, make_rng(4))
    assert a.tobytes() == b.tobytes()
