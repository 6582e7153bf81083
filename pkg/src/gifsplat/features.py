"""Frozen image feature extractor.

The handcrafted bank is separable, so every linear stage is a pair of small
dense 1-D operators applied along rows and columns (reflect padding baked into
the matrices).  That keeps the forward pass cheap and gives the transpose for
free when a loss needs gradients through the features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np

HANDCRAFTED_CHANNELS = 12
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0]) / 4.0
SOBEL_DIFF = np.array([-1.0, 0.0, 1.0]) / 2.0


class FeatureError(ValueError):
    pass


@lru_cache(maxsize=64)
def _conv_matrix(n: int, kernel: Tuple[float, ...]) -> np.ndarray:
    """``n x n`` matrix of a centered 1-D correlation with reflect padding."""
    k = np.asarray(kernel)
    r = len(k) // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for j, kv in enumerate(k):
            src = i + j - r
            # numpy "reflect": mirror about the edge sample without repeating it
            while src < 0 or src > n - 1:
                if n == 1:
                    src = 0
                    break
                src = -src if src < 0 else 2 * (n - 1) - src
            mat[i, src] += kv
    mat.flags.writeable = False
    return mat


def _sep(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Apply ``rows`` along axis 0 and ``cols`` along axis 1 of an H x W x C image."""
    return np.einsum("ij,jkc,lk->ilc", rows, img, cols, optimize=True)


def blur5(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    b = tuple(BINOMIAL5)
    return _sep(img, _conv_matrix(h, b), _conv_matrix(w, b))


@dataclass
class FeatureExtractorSpec:
    mode: str = "handcrafted"
    channels: int = HANDCRAFTED_CHANNELS
    weights: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("handcrafted", "loaded"):
            raise FeatureError(f"unknown feature mode {self.mode!r}")
        if self.mode == "handcrafted" and self.channels != HANDCRAFTED_CHANNELS:
            raise FeatureError("handcrafted mode has exactly 12 channels")
        if self.mode == "loaded":
            if self.weights is None:
                raise FeatureError("loaded mode needs weights")
            _check_conv_weights(self.weights)
            self.channels = self.weights["conv2_w"].shape[0]
        if self.channels < 3:
            raise FeatureError("feature extractor needs at least 3 channels")

    @classmethod
    def load(cls, path) -> "FeatureExtractorSpec":
        from .io import read_tensor_file
        _, tensors = read_tensor_file(path)
        return cls(mode="loaded", weights=tensors)


def _check_conv_weights(w: Dict[str, np.ndarray]) -> None:
    need = ("conv1_w", "conv1_b", "conv2_w", "conv2_b")
    for k in need:
        if k not in w:
            raise FeatureError(f"feature weights missing tensor {k!r}")
    c1, cin, k1, k1b = w["conv1_w"].shape
    c2, c1b, k2, k2b = w["conv2_w"].shape
    if cin != 3 or c1 != c1b or k1 != k1b or k2 != k2b or k1 % 2 == 0 or k2 % 2 == 0:
        raise FeatureError("malformed convolution weight shapes")
    if w["conv1_b"].shape != (c1,) or w["conv2_b"].shape != (c2,):
        raise FeatureError("malformed convolution bias shapes")
    if not all(np.all(np.isfinite(v)) for v in w.values()):
        raise FeatureError("non-finite feature weights")


def _gradient_parts(img):
    h, w = img.shape[:2]
    sm, df = tuple(SOBEL_SMOOTH), tuple(SOBEL_DIFF)
    gx = _sep(img, _conv_matrix(h, sm), _conv_matrix(w, df))
    gy = _sep(img, _conv_matrix(h, df), _conv_matrix(w, sm))
    return gx, gy


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-size correlation with reflect padding. x: H x W x Cin, w: Cout x Cin x k x k."""
    r = w.shape[2] // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)), mode="reflect")
    cols = np.lib.stride_tricks.sliding_window_view(xp, (w.shape[2], w.shape[3]), axis=(0, 1))
    # cols: H x W x Cin x k x k
    return np.einsum("hwcij,ocij->hwo", cols, w, optimize=True) + b, xp


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray, in_shape) -> np.ndarray:
    h, wd, _ = in_shape
    k = w.shape[2]
    r = k // 2
    gp = np.zeros((h + 2 * r, wd + 2 * r, w.shape[1]))
    contrib = np.einsum("hwo,ocij->hwijc", g, w, optimize=True)
    for i in range(k):
        for j in range(k):
            gp[i:i + h, j:j + wd] += contrib[:, :, i, j]
    # fold the reflected border back onto the samples it mirrors
    rows = _reflect_fold(h, r)
    cols = _reflect_fold(wd, r)
    return np.einsum("pi,pqc,qj->ijc", rows, gp, cols, optimize=True)


@lru_cache(maxsize=32)
def _reflect_fold(n: int, r: int) -> np.ndarray:
    m = np.zeros((n + 2 * r, n))
    for p in range(n + 2 * r):
        src = p - r
        while src < 0 or src > n - 1:
            src = -src if src < 0 else 2 * (n - 1) - src
        m[p, src] = 1.0
    return m


def extract_features(image: np.ndarray, spec: Optional[FeatureExtractorSpec] = None) -> np.ndarray:
    spec = spec or FeatureExtractorSpec()
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FeatureError(f"expected an H x W x 3 image, got {image.shape}")
    if spec.mode == "loaded":
        w = spec.weights
        a, _ = _conv2d(image, w["conv1_w"], w["conv1_b"])
        out, _ = _conv2d(np.maximum(a, 0), w["conv2_w"], w["conv2_b"])
        return out
    gx, gy = _gradient_parts(image)
    b1 = blur5(image)
    return np.concatenate([image, np.sqrt(gx * gx + gy * gy), b1, blur5(b1)], axis=2)


def features_vjp(image: np.ndarray, upstream: np.ndarray,
                 spec: Optional[FeatureExtractorSpec] = None) -> np.ndarray:
    """Pull a gradient on the feature map back to the input image."""
    spec = spec or FeatureExtractorSpec()
    image = np.asarray(image, dtype=float)
    if spec.mode == "loaded":
        w = spec.weights
        a, _ = _conv2d(image, w["conv1_w"], w["conv1_b"])
        g_hidden = _conv2d_input_grad(upstream, w["conv2_w"], a.shape) * (a > 0)
        return _conv2d_input_grad(g_hidden, w["conv1_w"], image.shape)
    h, wd = image.shape[:2]
    g = upstream[..., :3].copy()
    gx, gy = _gradient_parts(image)
    mag = np.sqrt(gx * gx + gy * gy)
    safe = np.where(mag > 0, mag, 1.0)
    gm = upstream[..., 3:6]
    ggx = np.where(mag > 0, gm * gx / safe, 0.0)
    ggy = np.where(mag > 0, gm * gy / safe, 0.0)
    sm, df = tuple(SOBEL_SMOOTH), tuple(SOBEL_DIFF)
    g += _sep(ggx, _conv_matrix(h, sm).T, _conv_matrix(wd, df).T)
    g += _sep(ggy, _conv_matrix(h, df).T, _conv_matrix(wd, sm).T)
    bh, bw = _conv_matrix(h, tuple(BINOMIAL5)).T, _conv_matrix(wd, tuple(BINOMIAL5)).T
    g2 = upstream[..., 6:9] + _sep(upstream[..., 9:12], bh, bw)
    g += _sep(g2, bh, bw)
    return g


def feature_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise FeatureError(f"feature maps differ in shape: {a.shape} vs {b.shape}")
    return a - b


def sample_features(feature_map: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Nearest-pixel lookup of feature vectors at pixel coordinates (u = column)."""
    h, w = feature_map.shape[:2]
    col = np.clip(np.rint(u).astype(int), 0, w - 1)
    row = np.clip(np.rint(v).astype(int), 0, h - 1)
    return feature_map[row, col]
