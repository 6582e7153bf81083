"""Forward-only T-step refinement: render, pool cues, predict residuals, update.

Nothing in this module computes a gradient.  ``refine`` with ``mode="ifsplat"``
uses observation cues only; ``mode="gifsplat"`` additionally renders novel
views between reference cameras, enhances them, and pools the enhancement
delta into prior cues.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import MIN_SCALE, Camera, GaussianScene, GeometryError, interpolate_cameras, logit
from .cues import compute_observation_cues, compute_prior_cues
from .enhancer import EnhancerError, EnhancerSpec, enhance
from .features import FeatureExtractorSpec, extract_features, sample_features
from .head import HeadParams, build_tokens, build_windows, head_forward, update_scene
from .metrics import mse, psnr
from .rasterizer import RenderOptions, render

logger = logging.getLogger(__name__)

View = Tuple[np.ndarray, Camera]


class RefineError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepViews:
    """Views used at one step: reference indices and novel ``(a, b, t)`` interpolations."""

    refs: Optional[Tuple[int, ...]] = None
    novel: Tuple[Tuple[int, int, float], ...] = ((0, 1, 1.0 / 3.0), (0, 1, 2.0 / 3.0))


@dataclass
class RefineConfig:
    steps: int = 3
    mode: str = "ifsplat"
    schedule: Optional[List[StepViews]] = None
    enhancer: EnhancerSpec = field(default_factory=EnhancerSpec)
    features: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    cell_size: float = 0.5
    render: RenderOptions = field(default_factory=RenderOptions)
    prior_on_refs: bool = False
    record_trajectory: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode not in ("ifsplat", "gifsplat"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def views_at(self, t: int) -> StepViews:
        if not self.schedule:
            return StepViews()
        return self.schedule[min(t, len(self.schedule) - 1)]


@dataclass
class StepRecord:
    step: int
    mse: List[float]
    psnr: List[float]
    seconds: float = 0.0
    obs_norm: Optional[float] = None
    prior_norm: Optional[float] = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    def to_dict(self) -> dict:
        return {"step": self.step, "mse": self.mse, "psnr": self.psnr,
                "mean_psnr": self.mean_psnr, "seconds": self.seconds,
                "obs_norm": self.obs_norm, "prior_norm": self.prior_norm}


@dataclass
class RefineTrace:
    steps: List[StepRecord] = field(default_factory=list)
    snapshots: List[GaussianScene] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def mean_psnr(self) -> List[float]:
        return [s.mean_psnr for s in self.steps]

    def to_dict(self) -> dict:
        return {"steps": [s.to_dict() for s in self.steps]}


def _ref_indices(sv: StepViews, n_views: int) -> List[int]:
    refs = list(range(n_views)) if sv.refs is None else list(sv.refs)
    for i in refs:
        if not 0 <= i < n_views:
            raise RefineError(f"reference view index {i} out of range")
    return refs


def novel_cameras(cameras: Sequence[Camera], sv: StepViews) -> List[Camera]:
    out = []
    for a, b, t in sv.novel:
        if not (0 <= a < len(cameras) and 0 <= b < len(cameras)):
            raise RefineError(f"novel view pair ({a}, {b}) out of range")
        out.append(interpolate_cameras(cameras[a], cameras[b], t))
    return out


@dataclass
class StepEvidence:
    obs: np.ndarray
    prior: Optional[np.ndarray]
    ref_images: List[np.ndarray]     # renders of the reference views at this state
    refs: List[int]


def gather_evidence(scene: GaussianScene, t: int, views: Sequence[View], cfg: RefineConfig,
                    target_features: Optional[List[np.ndarray]] = None) -> StepEvidence:
    """Render step ``t``'s views and pool observation (and prior) cues."""
    sv = cfg.views_at(t)
    refs = _ref_indices(sv, len(views))
    ref_views = [views[i] for i in refs]
    renders = [render(scene, cam, cfg.render) for _, cam in ref_views]
    tf = None if target_features is None else [target_features[i] for i in refs]
    obs = compute_observation_cues(scene, ref_views, renders, cfg.features, tf)
    prior = None
    if cfg.mode == "gifsplat":
        prior_renders = [render(scene, cam, cfg.render)
                         for cam in novel_cameras([c for _, c in views], sv)]
        if cfg.prior_on_refs:
            prior_renders += renders
        try:
            enhanced = [enhance(r.image, cfg.enhancer) for r in prior_renders]
        except EnhancerError as exc:
            raise EnhancerError(f"step {t}: {exc}") from exc
        if prior_renders:
            prior = compute_prior_cues(scene, prior_renders, enhanced, cfg.features)
        else:
            prior = np.zeros_like(obs)
    return StepEvidence(obs, prior, [r.image for r in renders], refs)


def _record(step, images, views, refs, seconds=0.0, ev: Optional[StepEvidence] = None):
    errs = [mse(img, views[i][0]) for img, i in zip(images, refs)]
    rec = StepRecord(step, errs, [psnr(img, views[i][0]) for img, i in zip(images, refs)],
                     seconds)
    if ev is not None:
        rec.obs_norm = float(np.mean(np.abs(ev.obs))) if ev.obs.size else 0.0
        if ev.prior is not None:
            rec.prior_norm = float(np.mean(np.abs(ev.prior))) if ev.prior.size else 0.0
    return rec


def refine(scene0: GaussianScene, views: Sequence[View], params: HeadParams,
           cfg: Optional[RefineConfig] = None) -> Tuple[GaussianScene, RefineTrace]:
    cfg = cfg or RefineConfig()
    if not views:
        raise RefineError("refinement needs at least one view")
    scene = scene0
    trace = RefineTrace()
    target_features = [extract_features(img, cfg.features) for img, _ in views]
    if cfg.record_trajectory:
        trace.snapshots.append(scene)
    for t in range(cfg.steps):
        start = time.perf_counter()
        ev = gather_evidence(scene, t, views, cfg, target_features)
        window = build_windows(scene, cfg.cell_size, t)
        tokens = build_tokens(scene, ev.obs, ev.prior, window)
        delta = head_forward(tokens, window, params, scene.scene_extent)
        try:
            nxt = update_scene(scene, delta)
            nxt.check_finite()
        except (ValueError, GeometryError) as exc:
            raise RefineError(f"non-finite state after step {t}: {exc}") from exc
        trace.steps.append(_record(t, ev.ref_images, views, ev.refs,
                                   time.perf_counter() - start, ev))
        scene = nxt
        del ev, window, tokens, delta, nxt    # keep the per-step peak independent of t
        if cfg.record_trajectory:
            trace.snapshots.append(scene)
        logger.debug("step %d: mean PSNR %.3f", t, trace.steps[-1].mean_psnr)
    refs = _ref_indices(cfg.views_at(cfg.steps), len(views))
    final = [render(scene, views[i][1], cfg.render).image for i in refs]
    trace.steps.append(_record(cfg.steps, final, views, refs))
    return scene, trace


# -- scene construction -----------------------------------------------------

def initialize_from_depth(views: Sequence[Tuple[np.ndarray, Camera, np.ndarray]],
                          spec: Optional[FeatureExtractorSpec] = None,
                          stride: int = 2) -> GaussianScene:
    """Unproject every ``stride``-th pixel with positive depth into one Gaussian."""
    spec = spec or FeatureExtractorSpec()
    pos, ls, col, feats = [], [], [], []
    for image, cam, depth in views:
        fmap = extract_features(image, spec)
        vs, us = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
        d = depth[vs, us]
        ok = d > 0
        u, v, d = us[ok].astype(float), vs[ok].astype(float), d[ok]
        pc = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=1)
        pos.append(cam.camera_to_world(pc))
        sigma = 0.5 * stride * d / np.sqrt(cam.fx * cam.fy)
        ls.append(np.repeat(np.log(sigma)[:, None], 3, axis=1))
        col.append(np.clip(image[vs[ok], us[ok]], 0.0, 1.0))
        feats.append(fmap[vs[ok], us[ok]])
    positions = np.concatenate(pos) if pos else np.zeros((0, 3))
    if len(positions) == 0:
        raise RefineError("depth maps produced no Gaussians")
    extent = max(float(np.max(np.linalg.norm(positions - positions.mean(0), axis=1))), 1e-3)
    n = len(positions)
    log_scales = np.clip(np.concatenate(ls), np.log(MIN_SCALE), np.log(extent))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianScene.from_arrays(positions, log_scales, rot, np.concatenate(col),
                                     np.full(n, float(logit(0.5))), np.concatenate(feats),
                                     extent)


def assign_features(scene: GaussianScene, views: Sequence[View],
                    spec: Optional[FeatureExtractorSpec] = None, near: float = 0.01) -> GaussianScene:
    """Sample ``psi(I)`` at each Gaussian's projection in the first view that sees it."""
    spec = spec or FeatureExtractorSpec()
    n = len(scene)
    feats = np.zeros((n, spec.channels))
    done = np.zeros(n, dtype=bool)
    for image, cam in views:
        fmap = extract_features(image, spec)
        pc = cam.world_to_camera(scene.positions)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pc[:, 0] / z + cam.cx
            v = cam.fy * pc[:, 1] / z + cam.cy
        inside = (~done & (z >= near) & (u >= -0.5) & (u < cam.width - 0.5)
                  & (v >= -0.5) & (v < cam.height - 0.5))
        if np.any(inside):
            feats[inside] = sample_features(fmap, u[inside], v[inside])
            done |= inside
    return scene.replace(features=feats)


@dataclass(frozen=True)
class PerturbConfig:
    position: float = 0.0       # std, as a fraction of scene_extent
    log_scale: float = 0.0
    color: float = 0.0
    opacity_logit: float = 0.0

    def __post_init__(self):
        if min(self.position, self.log_scale, self.color, self.opacity_logit) < 0:
            raise ValueError("noise scales must be >= 0")


def perturb_scene(scene: GaussianScene, noise: PerturbConfig, seed: int) -> GaussianScene:
    rng = np.random.default_rng(seed)
    n = len(scene)
    lo, hi = np.log(MIN_SCALE), np.log(scene.scene_extent)
    return scene.replace(
        positions=scene.positions + rng.normal(0.0, noise.position * scene.scene_extent, (n, 3)),
        log_scales=np.clip(scene.log_scales + rng.normal(0.0, noise.log_scale, (n, 3)), lo, hi),
        colors=np.clip(scene.colors + rng.normal(0.0, noise.color, (n, 3)), 0.0, 1.0),
        opacity_logits=scene.opacity_logits + rng.normal(0.0, noise.opacity_logit, n),
    )
