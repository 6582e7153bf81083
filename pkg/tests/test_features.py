import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gifsplat.features import (FeatureError, FeatureExtractorSpec, extract_features,
                               feature_difference, features_vjp, sample_features)
from gifsplat.io import write_tensor_file


def test_constant_grey():
    f = extract_features(np.full((9, 11, 3), 0.5))
    assert f.shape == (9, 11, 12)
    assert np.allclose(f[..., 0:3], 0.5, atol=1e-15)
    assert np.allclose(f[..., 3:6], 0.0, atol=1e-15)
    assert np.allclose(f[..., 6:12], 0.5, atol=1e-15)


def test_black_image():
    assert np.all(extract_features(np.zeros((6, 7, 3))) == 0)


def test_step_edge_sobel_response():
    # columns 0..4 are 0, 5..9 are 1; central difference (1 - 0)/2 on both edge columns
    img = np.zeros((8, 10, 3))
    img[:, 5:] = 1.0
    g = extract_features(img)[..., 3:6]
    assert np.allclose(g[:, 4], 0.5, atol=1e-15)
    assert np.allclose(g[:, 5], 0.5, atol=1e-15)
    assert np.allclose(np.delete(g, [4, 5], axis=1), 0.0, atol=1e-15)


def test_blur_matches_direct_convolution():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (7, 8, 3))
    k = np.array([1, 4, 6, 4, 1]) / 16.0
    pad = np.pad(img, ((2, 2), (2, 2), (0, 0)), mode="reflect")
    direct = np.zeros_like(img)
    for i in range(5):
        for j in range(5):
            direct += k[i] * k[j] * pad[i:i + 7, j:j + 8]
    assert np.allclose(extract_features(img)[..., 6:9], direct, atol=1e-14)


def test_feature_difference():
    rng = np.random.default_rng(1)
    a = extract_features(rng.uniform(0, 1, (5, 5, 3)))
    b = extract_features(rng.uniform(0, 1, (5, 5, 3)))
    assert np.all(feature_difference(a, a) == 0)
    assert np.array_equal(feature_difference(a, np.zeros_like(a)), a)
    assert np.allclose(feature_difference(a, b) + b, a, atol=1e-15)
    with pytest.raises(FeatureError):
        feature_difference(a, b[:4])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.3, 0.3).filter(lambda d: abs(d) > 1e-6))
def test_lipschitz_single_pixel(seed, delta):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.3, 0.7, (8, 8, 3))
    bumped = img.copy()
    bumped[rng.integers(8), rng.integers(8), rng.integers(3)] += delta
    change = np.abs(extract_features(bumped) - extract_features(img)).max()
    assert change <= 4 * abs(delta) + 1e-12


def test_deterministic():
    img = np.random.default_rng(2).uniform(0, 1, (12, 12, 3))
    assert np.array_equal(extract_features(img), extract_features(img.copy()))


def test_rejects_non_rgb():
    with pytest.raises(FeatureError):
        extract_features(np.zeros((4, 4)))


def _fd_vjp(spec, img, up, h=1e-6):
    fd = np.zeros_like(img)
    for idx in np.ndindex(img.shape):
        a = img.copy()
        a[idx] += h
        lp = np.sum(up * extract_features(a, spec))
        a[idx] -= 2 * h
        lm = np.sum(up * extract_features(a, spec))
        fd[idx] = (lp - lm) / (2 * h)
    return fd


def test_handcrafted_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (6, 5, 3))
    up = rng.normal(size=(6, 5, 12))
    assert np.allclose(features_vjp(img, up), _fd_vjp(None, img, up), atol=1e-6)


def _weights(rng, hidden=4, out=5):
    return {"conv1_w": rng.normal(0, 0.5, (hidden, 3, 3, 3)), "conv1_b": rng.normal(0, 0.1, hidden),
            "conv2_w": rng.normal(0, 0.5, (out, hidden, 3, 3)), "conv2_b": rng.normal(0, 0.1, out)}


def test_loaded_mode_from_file(tmp_path):
    rng = np.random.default_rng(4)
    w = _weights(rng)
    path = tmp_path / "psi.bin"
    write_tensor_file(path, {"kind": "features"}, w)
    spec = FeatureExtractorSpec.load(path)
    assert spec.mode == "loaded" and spec.channels == 5
    img = rng.uniform(0, 1, (6, 7, 3))
    f = extract_features(img, spec)
    assert f.shape == (6, 7, 5)
    up = rng.normal(size=f.shape)
    assert np.allclose(features_vjp(img, up, spec), _fd_vjp(spec, img, up), atol=1e-5)


def test_loaded_mode_malformed(tmp_path):
    rng = np.random.default_rng(5)
    w = _weights(rng)
    w["conv2_w"] = w["conv2_w"][:, :3]
    path = tmp_path / "bad.bin"
    write_tensor_file(path, {}, w)
    with pytest.raises(FeatureError):
        FeatureExtractorSpec.load(path)
    w = _weights(rng)
    del w["conv1_b"]
    with pytest.raises(FeatureError):
        FeatureExtractorSpec(mode="loaded", weights=w)


def test_sample_features_nearest():
    fmap = np.arange(4 * 5 * 2, dtype=float).reshape(4, 5, 2)
    out = sample_features(fmap, np.array([0.2, 3.6, 10.0]), np.array([0.0, 1.4, -3.0]))
    assert np.array_equal(out, fmap[[0, 1, 0], [0, 4, 4]])
