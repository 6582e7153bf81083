"""Line-based ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  Values are parsed lazily by the
builders below, which know each key's type; unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, Optional

from .enhancer import EnhancerSpec
from .features import FeatureExtractorSpec
from .rasterizer import RenderOptions
from .refine import PerturbConfig, RefineConfig, StepViews
from .train import SyntheticSceneSpec, TrainConfig


class ConfigError(ValueError):
    pass


SYNTH_KEYS = {"seed", "n_min", "n_max", "extent", "palette", "ring_radius", "n_cameras",
              "arc_degrees", "width", "height", "focal", "scale_min", "scale_max",
              "perturb_position", "perturb_log_scale", "perturb_color", "perturb_opacity"}
RENDER_KEYS = {"background", "near", "k_top", "precision", "threads"}
REFINE_KEYS = {"steps", "mode", "enhancer", "unsharp_strength", "enhancer_timeout",
               "enhancer_workdir", "cell_size", "prior_on_refs", "novel_views", "ref_views",
               "features"} | RENDER_KEYS
TRAIN_KEYS = {"iterations", "lr", "beta1", "beta2", "eps", "batch", "n_scenes", "n_heldout",
              "lam_rgb", "lam_feat", "step_weights", "d_model", "n_heads", "grad_clip",
              "eval_every"}
BASELINE_KEYS = {"baseline_steps", "baseline_lr", "line_search"}
BENCH_KEYS = {"repeats", "bench_steps"}
ALL_KEYS = SYNTH_KEYS | REFINE_KEYS | TRAIN_KEYS | BASELINE_KEYS | BENCH_KEYS


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config(path: Optional[str], overrides: Iterable[str] = ()) -> Dict[str, str]:
    cfg = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    for item in overrides:
        cfg.update(parse_config_text(item, "--set"))
    return cfg


def _get(cfg, key, conv, default):
    if key not in cfg:
        return default
    try:
        return conv(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {cfg[key]!r}") from exc


def _bool(s: str) -> bool:
    s = s.lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _floats(s: str):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _novel(s: str):
    items = []
    for part in s.split(";"):
        if part.strip():
            a, b, t = part.split(",")
            items.append((int(a), int(b), float(t)))
    return tuple(items)


def synth_spec(cfg: Dict[str, str]) -> SyntheticSceneSpec:
    d = SyntheticSceneSpec()
    p = d.perturb
    return SyntheticSceneSpec(
        n_min=_get(cfg, "n_min", int, d.n_min), n_max=_get(cfg, "n_max", int, d.n_max),
        extent=_get(cfg, "extent", float, d.extent), palette=cfg.get("palette", d.palette),
        ring_radius=_get(cfg, "ring_radius", float, d.ring_radius),
        n_cameras=_get(cfg, "n_cameras", int, d.n_cameras),
        arc_degrees=_get(cfg, "arc_degrees", float, d.arc_degrees),
        width=_get(cfg, "width", int, d.width), height=_get(cfg, "height", int, d.height),
        focal=_get(cfg, "focal", float, d.focal),
        scale_range=(_get(cfg, "scale_min", float, d.scale_range[0]),
                     _get(cfg, "scale_max", float, d.scale_range[1])),
        perturb=PerturbConfig(_get(cfg, "perturb_position", float, p.position),
                              _get(cfg, "perturb_log_scale", float, p.log_scale),
                              _get(cfg, "perturb_color", float, p.color),
                              _get(cfg, "perturb_opacity", float, p.opacity_logit)))


def render_options(cfg: Dict[str, str], threads: Optional[int] = None) -> RenderOptions:
    d = RenderOptions()
    return RenderOptions(
        background=_get(cfg, "background", _floats, d.background),
        near=_get(cfg, "near", float, d.near), k_top=_get(cfg, "k_top", int, d.k_top),
        precision=cfg.get("precision", d.precision),
        threads=threads if threads is not None else _get(cfg, "threads", int, d.threads))


def feature_spec(cfg: Dict[str, str]) -> FeatureExtractorSpec:
    value = cfg.get("features", "handcrafted")
    if value == "handcrafted":
        return FeatureExtractorSpec()
    return FeatureExtractorSpec.load(value)


def enhancer_spec(cfg: Dict[str, str]) -> EnhancerSpec:
    spec = EnhancerSpec.parse(cfg.get("enhancer", "identity"),
                              _get(cfg, "unsharp_strength", float, 1.0))
    spec.timeout = _get(cfg, "enhancer_timeout", float, spec.timeout)
    spec.workdir = cfg.get("enhancer_workdir", spec.workdir)
    return spec


def refine_config(cfg: Dict[str, str], threads: Optional[int] = None) -> RefineConfig:
    sv = StepViews()
    schedule = None
    if "novel_views" in cfg or "ref_views" in cfg:
        refs = _get(cfg, "ref_views", _ints, None)
        schedule = [StepViews(refs, _get(cfg, "novel_views", _novel, sv.novel))]
    return RefineConfig(
        steps=_get(cfg, "steps", int, 3), mode=cfg.get("mode", "ifsplat"), schedule=schedule,
        enhancer=enhancer_spec(cfg), features=feature_spec(cfg),
        cell_size=_get(cfg, "cell_size", float, 0.5), render=render_options(cfg, threads),
        prior_on_refs=_get(cfg, "prior_on_refs", _bool, False))


def train_config(cfg: Dict[str, str]) -> TrainConfig:
    d = TrainConfig()
    clip = cfg.get("grad_clip")
    return TrainConfig(
        steps=_get(cfg, "steps", int, d.steps),
        step_weights=_get(cfg, "step_weights", _floats, None),
        lam_rgb=_get(cfg, "lam_rgb", float, d.lam_rgb),
        lam_feat=_get(cfg, "lam_feat", float, d.lam_feat),
        lr=_get(cfg, "lr", float, d.lr), beta1=_get(cfg, "beta1", float, d.beta1),
        beta2=_get(cfg, "beta2", float, d.beta2), eps=_get(cfg, "eps", float, d.eps),
        batch=_get(cfg, "batch", int, d.batch),
        iterations=_get(cfg, "iterations", int, d.iterations),
        seed=_get(cfg, "seed", int, d.seed), n_scenes=_get(cfg, "n_scenes", int, d.n_scenes),
        n_heldout=_get(cfg, "n_heldout", int, d.n_heldout), scene=synth_spec(cfg),
        d_model=_get(cfg, "d_model", int, d.d_model), n_heads=_get(cfg, "n_heads", int, d.n_heads),
        cell_size=_get(cfg, "cell_size", float, d.cell_size), mode=cfg.get("mode", d.mode),
        enhancer=enhancer_spec(cfg), features=feature_spec(cfg),
        precision=cfg.get("precision", d.precision),
        grad_clip=None if clip in ("none", "0") else _get(cfg, "grad_clip", float, d.grad_clip),
        eval_every=_get(cfg, "eval_every", int, d.eval_every))
