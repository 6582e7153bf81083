"""Toy-scale training of the update head and the per-scene descent baseline.

Training backpropagates through the unrolled refinement loop along the scene
state path: loss -> render -> update -> head -> tokens -> previous state.  Cue
vectors (observation and prior) and window partitions are treated as
constants, so the gradient is that of the loop with those quantities frozen at
their forward-pass values.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import MIN_SCALE, Camera, GaussianScene, logit, normalize_quats
from .enhancer import EnhancerSpec
from .features import FeatureExtractorSpec, extract_features, features_vjp
from .head import (TRAINABLE, HeadParams, build_tokens, build_windows, head_backward,
                   head_forward, init_head_params, tokens_backward, update_backward,
                   update_scene)
from .metrics import mse
from .rasterizer import RenderOptions, SceneGradients, render, render_backward
from .refine import (PerturbConfig, RefineConfig, StepViews, assign_features,
                     gather_evidence, perturb_scene, refine)

logger = logging.getLogger(__name__)

# Head trained with ``TrainConfig()`` defaults (seed 0); see ``toy_head``.
TOY_HEAD = Path(__file__).parent / "data" / "toy_head.bin"


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good: Optional[HeadParams] = None):
        super().__init__(message)
        self.last_good = last_good


# -- synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneSpec:
    n_min: int = 120
    n_max: int = 160
    extent: float = 1.0
    palette: str = "random"
    ring_radius: float = 3.0
    n_cameras: int = 3
    arc_degrees: float = 60.0
    width: int = 32
    height: int = 32
    focal: float = 1.4            # focal length in units of image width
    scale_range: Tuple[float, float] = (0.08, 0.16)
    perturb: PerturbConfig = PerturbConfig(position=0.01, log_scale=0.1, color=0.12,
                                           opacity_logit=0.4)

    def __post_init__(self):
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ValueError("Gaussian count range must satisfy 1 <= n_min <= n_max")
        if self.n_cameras < 1:
            raise ValueError("need at least one camera")
        if self.palette not in ("random", "textured-plane"):
            raise ValueError(f"unknown palette {self.palette!r}")


@dataclass
class SyntheticScene:
    scene: GaussianScene
    cameras: List[Camera]
    images: List[np.ndarray]
    depths: List[np.ndarray]

    @property
    def views(self) -> List[Tuple[np.ndarray, Camera]]:
        return list(zip(self.images, self.cameras))


def ring_cameras(spec: SyntheticSceneSpec) -> List[Camera]:
    f = spec.focal * spec.width
    cams = []
    span = np.deg2rad(spec.arc_degrees)
    for k in range(spec.n_cameras):
        ang = 0.0 if spec.n_cameras == 1 else -0.5 * span + span * k / (spec.n_cameras - 1)
        eye = spec.ring_radius * np.array([np.sin(ang), 0.0, -np.cos(ang)])
        cams.append(Camera.look_at(eye, np.zeros(3), [0.0, -1.0, 0.0], f, f,
                                   spec.width / 2.0, spec.height / 2.0,
                                   spec.width, spec.height))
    return cams


def generate_scene(spec: SyntheticSceneSpec, seed: int,
                   opts: Optional[RenderOptions] = None,
                   feature_spec: Optional[FeatureExtractorSpec] = None) -> SyntheticScene:
    """Seeded Gaussians, ring cameras, and self-rendered images and depths."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    ext = spec.extent
    lo, hi = spec.scale_range
    if spec.palette == "random":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pos = 0.6 * ext * d * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
        colors = rng.uniform(0.05, 0.95, (n, 3))
        log_scales = np.log(ext * rng.uniform(lo, hi, (n, 3)))
        quats = rng.normal(size=(n, 4))
    else:
        side = int(np.ceil(np.sqrt(n)))
        g = (np.arange(side) + 0.5) / side * 1.2 * ext - 0.6 * ext
        gx, gy = np.meshgrid(g, g)
        pos = np.stack([gx.ravel(), gy.ravel(), np.zeros(side * side)], axis=1)[:n]
        pos[:, 2] += rng.normal(0, 0.02 * ext, n)
        freq = rng.uniform(2.0, 5.0, 3)
        phase = rng.uniform(0, 2 * np.pi, 3)
        colors = 0.5 + 0.4 * np.sin(pos[:, :1] * freq * np.pi / ext + pos[:, 1:2] * freq + phase)
        step = 1.2 * ext / side
        log_scales = np.log(np.tile([0.6 * step, 0.6 * step, 0.1 * step], (n, 1)))
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opac = rng.normal(1.5, 0.5, n)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scene = GaussianScene.from_arrays(pos, log_scales, quats, colors, opac, None, ext)
    cams = ring_cameras(spec)
    outs = [render(scene, c, opts) for c in cams]
    images = [np.clip(o.image.astype(float), 0.0, 1.0) for o in outs]
    depths = [o.depth.astype(float) for o in outs]
    scene = assign_features(scene, list(zip(images, cams)), feature_spec)
    return SyntheticScene(scene, cams, images, depths)


@dataclass
class TrainingSample:
    truth: SyntheticScene
    init: GaussianScene

    @property
    def views(self):
        return self.truth.views


def make_sample(spec: SyntheticSceneSpec, seed: int, opts: Optional[RenderOptions] = None,
                feature_spec: Optional[FeatureExtractorSpec] = None) -> TrainingSample:
    truth = generate_scene(spec, seed, opts, feature_spec)
    return TrainingSample(truth, perturb_scene(truth.scene, spec.perturb, seed + 7919))


# -- losses -------------------------------------------------------------------

def stage1_loss(scene: GaussianScene, views: Sequence[Tuple[np.ndarray, Camera]],
                lam_rgb: float = 1.0, opts: Optional[RenderOptions] = None,
                lam_feat: float = 0.0, feature_spec: Optional[FeatureExtractorSpec] = None,
                need_grad: bool = True):
    """``lam_rgb`` times the view-averaged pixel MSE (plus optional feature MSE).

    Returns ``(loss, SceneGradients)``; gradients are ``None`` when not needed.
    """
    if not views:
        raise ValueError("stage-1 loss needs at least one view")
    m = len(views)
    total = 0.0
    grads = SceneGradients.zeros(len(scene)) if need_grad else None
    for target, cam in views:
        img = render(scene, cam, opts).image.astype(float)
        diff = img - target
        total += lam_rgb * float(np.mean(diff ** 2)) / m
        up = lam_rgb * 2.0 * diff / diff.size / m
        if lam_feat:
            fd = extract_features(img, feature_spec) - extract_features(target, feature_spec)
            total += lam_feat * float(np.mean(fd ** 2)) / m
            if need_grad:
                up = up + features_vjp(img, lam_feat * 2.0 * fd / fd.size / m, feature_spec)
        if need_grad and np.any(up):
            grads = grads + render_backward(scene, cam, up, opts)
    return total, grads


def default_step_weights(steps: int) -> np.ndarray:
    return np.arange(1, steps + 1) / float(steps)


def stage2_loss(trajectory: Sequence[Sequence[np.ndarray]], targets: Sequence[np.ndarray],
                weights: Optional[Sequence[float]] = None) -> float:
    """Weighted sum over steps of the view-averaged MSE; ``trajectory[t][m]`` is R_m^(t+1)."""
    steps = len(trajectory)
    w = default_step_weights(steps) if weights is None else np.asarray(weights, dtype=float)
    if len(w) != steps:
        raise ValueError(f"{len(w)} step weights for {steps} steps")
    total = 0.0
    for wt, renders in zip(w, trajectory):
        total += wt * float(np.mean([mse(r, t) for r, t in zip(renders, targets)]))
    return total


# -- unrolled training ----------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 3
    step_weights: Optional[Tuple[float, ...]] = None
    lam_rgb: float = 1.0
    lam_feat: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 1
    iterations: int = 2000
    seed: int = 0
    n_scenes: int = 200
    n_heldout: int = 20
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    d_model: int = 64
    n_heads: int = 4
    cell_size: float = 0.5
    mode: str = "ifsplat"
    enhancer: EnhancerSpec = field(default_factory=EnhancerSpec)
    features: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    precision: str = "float32"
    grad_clip: Optional[float] = 1.0
    eval_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.steps < 1:
            raise ValueError("need at least one unrolled step")
        if self.step_weights is not None:
            if len(self.step_weights) != self.steps:
                raise ValueError("one weight per unrolled step required")
            if min(self.step_weights) <= 0:
                raise ValueError("step weights must be positive")

    @property
    def weights(self) -> np.ndarray:
        if self.step_weights is None:
            return default_step_weights(self.steps)
        return np.asarray(self.step_weights, dtype=float)

    def refine_config(self, steps: Optional[int] = None) -> RefineConfig:
        return RefineConfig(steps=self.steps if steps is None else steps, mode=self.mode,
                            enhancer=self.enhancer, features=self.features,
                            cell_size=self.cell_size,
                            render=RenderOptions(precision=self.precision))


@dataclass
class FrozenStep:
    obs: np.ndarray
    prior: Optional[np.ndarray]
    window: object


def unrolled_loss(params: HeadParams, sample: TrainingSample, cfg: TrainConfig,
                  frozen: Optional[List[FrozenStep]] = None, need_grad: bool = True):
    """Stage-2 loss of one sample and its gradient w.r.t. the trainable head tensors.

    Returns ``(loss, grads or None, frozen_steps)``.  Passing ``frozen`` replays
    the cues and windows of an earlier pass, which is what the gradient refers to.
    """
    rcfg = cfg.refine_config()
    views = sample.views
    targets = None if frozen is not None else [extract_features(i, cfg.features)
                                               for i, _ in views]
    weights = cfg.weights
    scene = sample.init
    tape = []
    record: List[FrozenStep] = []
    loss = 0.0
    step_grads = []
    for t in range(cfg.steps):
        if frozen is None:
            ev = gather_evidence(scene, t, views, rcfg, targets)
            fs = FrozenStep(ev.obs, ev.prior, build_windows(scene, cfg.cell_size, t))
        else:
            fs = frozen[t]
        record.append(fs)
        tokens = build_tokens(scene, fs.obs, fs.prior, fs.window)
        if need_grad:
            delta, cache = head_forward(tokens, fs.window, params, scene.scene_extent,
                                        return_cache=True)
        else:
            delta, cache = head_forward(tokens, fs.window, params, scene.scene_extent), None
        nxt = update_scene(scene, delta)
        tape.append((scene, delta, cache, fs.window))
        scene = nxt
        lt, gt = stage1_loss(scene, views, cfg.lam_rgb, rcfg.render, cfg.lam_feat,
                             cfg.features, need_grad)
        loss += weights[t] * lt
        step_grads.append(gt)
    if not need_grad:
        return loss, None, record

    grads = {k: np.zeros_like(params.tensors[k]) for k in TRAINABLE}
    n = len(scene)
    g_pos, g_ls = np.zeros((n, 3)), np.zeros((n, 3))
    g_col, g_op = np.zeros((n, 3)), np.zeros(n)
    for t in reversed(range(cfg.steps)):
        sg = step_grads[t]
        g_pos = g_pos + weights[t] * sg.positions
        g_ls = g_ls + weights[t] * sg.log_scales
        g_col = g_col + weights[t] * sg.colors
        g_op = g_op + weights[t] * sg.opacity_logits
        prev, delta, cache, window = tape[t]
        (g_pos, g_ls, g_col, g_op), g_delta = update_backward(prev, delta, g_pos, g_ls,
                                                              g_col, g_op)
        gp, g_tok = head_backward(g_delta, cache, params)
        for k in TRAINABLE:
            grads[k] += gp[k]
        tp, tl, tc, to = tokens_backward(g_tok, window)
        g_pos, g_ls, g_col, g_op = g_pos + tp, g_ls + tl, g_col + tc, g_op + to
    return loss, grads, record


class Adam:
    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


HELDOUT_OFFSET = 500_000


def _seed_base(cfg: TrainConfig) -> int:
    return cfg.seed * 1_000_003


def heldout_samples(cfg: TrainConfig) -> List[TrainingSample]:
    opts = RenderOptions(precision=cfg.precision)
    base = _seed_base(cfg) + HELDOUT_OFFSET
    return [make_sample(cfg.scene, base + i, opts, cfg.features) for i in range(cfg.n_heldout)]


def build_dataset(cfg: TrainConfig) -> Tuple[List[TrainingSample], List[TrainingSample]]:
    """Training and held-out samples; the two seed ranges never overlap."""
    if cfg.n_scenes > HELDOUT_OFFSET:
        raise ValueError(f"at most {HELDOUT_OFFSET} training scenes")
    opts = RenderOptions(precision=cfg.precision)
    base = _seed_base(cfg)
    train = [make_sample(cfg.scene, base + i, opts, cfg.features) for i in range(cfg.n_scenes)]
    return train, heldout_samples(cfg)


def step_psnr_table(params: HeadParams, samples: Sequence[TrainingSample], cfg: TrainConfig,
                    steps: int) -> np.ndarray:
    """Mean reference-view PSNR per sample (rows) after 0..steps refinement steps."""
    rcfg = cfg.refine_config(steps)
    rows = []
    for s in samples:
        _, trace = refine(s.init, s.views, params, rcfg)
        rows.append(trace.mean_psnr())
    return np.asarray(rows)


@dataclass
class TrainLog:
    losses: List[float] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"losses": self.losses, "evals": self.evals, "seconds": self.seconds}


def train_head(cfg: TrainConfig, params: Optional[HeadParams] = None,
               dataset: Optional[Tuple[List[TrainingSample], List[TrainingSample]]] = None,
               progress=None) -> Tuple[HeadParams, TrainLog]:
    start = time.perf_counter()
    train, held = dataset if dataset is not None else build_dataset(cfg)
    if params is None:
        params = init_head_params(cfg.features.channels, cfg.features.channels,
                                  cfg.d_model, cfg.n_heads, seed=cfg.seed)
    params = params.copy()
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 17)
    log = TrainLog()
    tensors = {k: params.tensors[k] for k in TRAINABLE}
    last_good = params.copy()
    for it in range(cfg.iterations):
        batch = rng.integers(0, len(train), cfg.batch)
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in tensors.items()}
        for idx in batch:
            loss, g, _ = unrolled_loss(params, train[int(idx)], cfg)
            total += loss / cfg.batch
            for k in grads:
                grads[k] += g[k] / cfg.batch
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss at iteration {it}", last_good)
        last_good = params.copy()
        if cfg.grad_clip:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        opt.step(tensors, grads)
        params = params.with_tensors(tensors)
        log.losses.append(total)
        if cfg.eval_every and held and (it + 1) % cfg.eval_every == 0:
            table = step_psnr_table(params, held, cfg, cfg.steps)
            log.evals.append({"iteration": it + 1,
                              "mean_psnr_per_step": table.mean(axis=0).tolist()})
        if progress is not None:
            progress(it, total)
    log.seconds = time.perf_counter() - start
    return params, log


# -- per-scene descent baseline -------------------------------------------------

@dataclass
class BaselineResult:
    scene: GaussianScene
    losses: List[float]
    diverged: bool = False
    seconds: float = 0.0


def _descend(scene: GaussianScene, g: SceneGradients, lr: float) -> GaussianScene:
    lo, hi = np.log(MIN_SCALE), np.log(scene.scene_extent)
    return scene.replace(
        positions=scene.positions - lr * g.positions,
        log_scales=np.clip(scene.log_scales - lr * g.log_scales, lo, hi),
        rotations=normalize_quats(scene.rotations - lr * g.rotations),
        colors=np.clip(scene.colors - lr * g.colors, 0.0, 1.0),
        opacity_logits=scene.opacity_logits - lr * g.opacity_logits,
    )


def gradient_descent_baseline(scene0: GaussianScene, views, steps: int, lr: float,
                              line_search: bool = False,
                              opts: Optional[RenderOptions] = None,
                              lam_rgb: float = 1.0) -> BaselineResult:
    """Plain gradient descent on every Gaussian parameter against the stage-1 loss.

    ``losses[k]`` is the loss after ``k`` updates.  With ``line_search`` the step
    is halved until the loss does not increase, so the curve is non-increasing.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    start = time.perf_counter()
    scene = scene0
    loss, g = stage1_loss(scene, views, lam_rgb, opts)
    losses = [loss]
    diverged = False
    for _ in range(steps):
        if line_search:
            step = lr
            for _ in range(30):
                cand = _descend(scene, g, step)
                cl, cg = stage1_loss(cand, views, lam_rgb, opts)
                if cl <= loss:
                    scene, loss, g = cand, cl, cg
                    break
                step *= 0.5
        else:
            scene = _descend(scene, g, lr)
            loss, g = stage1_loss(scene, views, lam_rgb, opts)
        losses.append(loss)
        if not np.isfinite(loss) or loss > 10.0 * losses[0]:
            diverged = True
            break
    return BaselineResult(scene, losses, diverged, time.perf_counter() - start)


def toy_head() -> HeadParams:
    """The shipped head trained by ``train_head(TrainConfig())``."""
    return HeadParams.load(TOY_HEAD)
