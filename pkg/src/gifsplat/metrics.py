"""PSNR, luminance SSIM and a feature-space distance for evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])


def _same_shape(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float) -> float:
    if err <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def _gauss_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, len(k), axis=0)
    rows = win @ k
    win = np.lib.stride_tricks.sliding_window_view(rows, len(k), axis=1)
    return win @ k


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b) -> float:
    """Single-scale SSIM on BT.601 luminance, averaged over valid window positions."""
    a, b = _same_shape(a, b)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _gauss_kernel()
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def featdist(a, b, spec=None) -> float:
    from .features import extract_features
    a, b = _same_shape(a, b)
    return float(np.sqrt(np.mean((extract_features(a, spec) - extract_features(b, spec)) ** 2)))


@dataclass
class MetricReport:
    view_ids: List[str] = field(default_factory=list)
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    featdist: List[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_featdist(self) -> float:
        return float(np.mean(self.featdist))

    def to_dict(self) -> dict:
        return {
            "views": [{"id": v, "psnr": p, "ssim": s, "featdist": f}
                      for v, p, s, f in zip(self.view_ids, self.psnr, self.ssim, self.featdist)],
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim,
                     "featdist": self.mean_featdist},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        lines = [f"{'view':<12}{'PSNR':>10}{'SSIM':>10}{'featdist':>11}"]
        for v, p, s, f in zip(self.view_ids, self.psnr, self.ssim, self.featdist):
            lines.append(f"{v:<12}{p:>10.4f}{s:>10.4f}{f:>11.5f}")
        lines.append(f"{'mean':<12}{self.mean_psnr:>10.4f}{self.mean_ssim:>10.4f}"
                     f"{self.mean_featdist:>11.5f}")
        return "\n".join(lines)


def evaluate(scene, eval_views: Sequence[Tuple[np.ndarray, object]],
             opts=None, view_ids: Optional[Sequence[str]] = None) -> MetricReport:
    from .rasterizer import render
    if not eval_views:
        raise ValueError("evaluation needs at least one view")
    ids = list(view_ids) if view_ids is not None else [f"view{i}" for i in range(len(eval_views))]
    report = MetricReport()
    for vid, (gt, cam) in zip(ids, eval_views):
        img = render(scene, cam, opts).image
        report.view_ids.append(vid)
        report.psnr.append(psnr(img, gt))
        report.ssim.append(ssim(img, gt))
        report.featdist.append(featdist(img, gt))
    return report
