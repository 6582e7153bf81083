"""Per-Gaussian cue vectors pooled from pixel-space feature differences.

Both cue kinds use the same normalized pooling: numerators and denominators
are summed over every view of the step before a single division per Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Camera, GaussianScene
from .features import FeatureExtractorSpec, extract_features, feature_difference
from .rasterizer import RenderOutput, pool_over_pixels

POOL_EPS = 1e-8


@dataclass
class CueVectors:
    observation: np.ndarray   # (N, D)
    prior: np.ndarray         # (N, D)
    coverage: np.ndarray      # (N,) pooled weight sums


def pool_views(renders: Sequence[RenderOutput], diffs: Sequence[np.ndarray],
               n: int, channels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized pooling of per-view difference maps; returns (cues, coverage)."""
    num = np.zeros((n, channels))
    den = np.zeros(n)
    for out, diff in zip(renders, diffs):
        s, w = pool_over_pixels(out, diff)
        num += s
        den += w
    cues = num / (den + POOL_EPS)[:, None]
    cues[den == 0] = 0.0
    return cues, den


def compute_observation_cues(scene: GaussianScene,
                             ref_views: Sequence[Tuple[np.ndarray, Camera]],
                             renders: Sequence[RenderOutput],
                             spec: Optional[FeatureExtractorSpec] = None,
                             target_features: Optional[List[np.ndarray]] = None,
                             return_coverage: bool = False):
    """Pool ``psi(I_m) - psi(R_m)`` onto Gaussians over all reference views.

    ``target_features`` may carry precomputed ``psi(I_m)`` maps; the reference
    images never change across refinement steps.
    """
    spec = spec or FeatureExtractorSpec()
    if len(ref_views) != len(renders):
        raise ValueError(f"{len(ref_views)} reference views but {len(renders)} renders")
    if target_features is None:
        target_features = [extract_features(img, spec) for img, _ in ref_views]
    diffs = [feature_difference(tf, extract_features(out.image, spec))
             for tf, out in zip(target_features, renders)]
    cues, cov = pool_views(renders, diffs, len(scene), spec.channels)
    return (cues, cov) if return_coverage else cues


def compute_prior_cues(scene: GaussianScene, renders: Sequence[RenderOutput],
                       enhanced: Sequence[np.ndarray],
                       spec: Optional[FeatureExtractorSpec] = None,
                       return_coverage: bool = False):
    """Pool ``psi(enhanced) - psi(render)``; the enhancer output is a constant."""
    spec = spec or FeatureExtractorSpec()
    if len(renders) != len(enhanced):
        raise ValueError(f"{len(renders)} renders but {len(enhanced)} enhanced images")
    diffs = []
    for out, enh in zip(renders, enhanced):
        if np.shape(enh) != out.image.shape:
            raise ValueError(f"enhanced image shape {np.shape(enh)} does not match "
                             f"render {out.image.shape}")
        diffs.append(feature_difference(extract_features(enh, spec),
                                        extract_features(out.image, spec)))
    cues, cov = pool_views(renders, diffs, len(scene), spec.channels)
    return (cues, cov) if return_coverage else cues
