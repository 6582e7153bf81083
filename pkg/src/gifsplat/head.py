"""Weight-shared residual update head.

Per step, every Gaussian becomes a token ``[state | observation cue | prior
cue]``.  Tokens sharing a voxel window attend to each other through one
multi-head self-attention layer; an MLP then maps each token to a bounded
10-channel residual (position 3, log-scale 3, color 3, opacity logit 1).

``head_forward`` can return a cache that ``head_backward`` consumes, which is
how training differentiates through the unrolled loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import MIN_SCALE, GaussianScene
from .io import read_tensor_file, write_tensor_file

N_OUT = 10
STATE_BASE = 10          # relative position 3, log-scale 3, color 3, opacity logit 1
K_WIN = 256
WIN_CHUNK = 4            # windows per attention block; bounds the working set
# per-channel residual bounds; the position entries are multiplied by scene_extent
DEFAULT_TAU = np.array([0.02, 0.02, 0.02, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 1.0])
TRAINABLE = ("embed_w", "embed_b", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b",
             "o_w", "o_b", "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b")


class HeadError(ValueError):
    pass


@dataclass
class HeadParams:
    tensors: Dict[str, np.ndarray]
    n_heads: int
    cue_dim: int
    feature_dim: int
    tau: np.ndarray = field(default_factory=lambda: DEFAULT_TAU.copy())

    def __post_init__(self):
        missing = [k for k in TRAINABLE + ("step_scale",) if k not in self.tensors]
        if missing:
            raise HeadError(f"head parameters missing {missing}")
        if not all(np.all(np.isfinite(v)) for v in self.tensors.values()):
            raise HeadError("head parameters contain non-finite values")
        if np.any(self.tensors["step_scale"] <= 0):
            raise HeadError("step scales must be positive")
        d = self.d_model
        if d % self.n_heads:
            raise HeadError(f"d_model {d} not divisible by {self.n_heads} heads")
        if self.tensors["embed_w"].shape[0] != self.token_dim:
            raise HeadError("embedding width does not match the token layout")
        self.tau = np.asarray(self.tau, dtype=float)

    @property
    def d_model(self) -> int:
        return self.tensors["embed_w"].shape[1]

    @property
    def token_dim(self) -> int:
        return STATE_BASE + self.feature_dim + 2 * self.cue_dim

    def parameter_count(self) -> int:
        return int(sum(self.tensors[k].size for k in TRAINABLE))

    def copy(self) -> "HeadParams":
        return HeadParams({k: v.copy() for k, v in self.tensors.items()}, self.n_heads,
                          self.cue_dim, self.feature_dim, self.tau.copy())

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> "HeadParams":
        merged = dict(self.tensors)
        merged.update(tensors)
        return HeadParams(merged, self.n_heads, self.cue_dim, self.feature_dim, self.tau.copy())

    def equals(self, other: "HeadParams") -> bool:
        return (self.n_heads == other.n_heads and self.cue_dim == other.cue_dim
                and self.feature_dim == other.feature_dim
                and np.array_equal(self.tau, other.tau)
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))

    def header(self) -> dict:
        return {"kind": "head", "d_model": self.d_model, "n_heads": self.n_heads,
                "cue_dim": self.cue_dim, "feature_dim": self.feature_dim,
                "tau": [float(t) for t in self.tau]}

    def save(self, path) -> None:
        write_tensor_file(path, self.header(), self.tensors)

    @classmethod
    def load(cls, path) -> "HeadParams":
        header, tensors = read_tensor_file(path)
        if header.get("kind") != "head":
            raise HeadError(f"{path} is not a head parameter file")
        params = cls(tensors, int(header["n_heads"]), int(header["cue_dim"]),
                     int(header["feature_dim"]), np.asarray(header["tau"], dtype=float))
        if params.d_model != header["d_model"]:
            raise HeadError("header d_model does not match tensors")
        return params


def init_head_params(cue_dim: int, feature_dim: int, d_model: int = 64, n_heads: int = 4,
                     seed: int = 0, tau: Optional[np.ndarray] = None,
                     out_std: float = 1e-2) -> HeadParams:
    rng = np.random.default_rng(seed)
    in_dim = STATE_BASE + feature_dim + 2 * cue_dim

    def dense(fan_in, fan_out, std=None):
        std = np.sqrt(1.0 / fan_in) if std is None else std
        return rng.normal(0.0, std, (fan_in, fan_out)).astype(np.float32).astype(float)

    t = {"embed_w": dense(in_dim, d_model), "embed_b": np.zeros(d_model)}
    for name in ("q", "k", "v", "o"):
        t[f"{name}_w"] = dense(d_model, d_model)
        t[f"{name}_b"] = np.zeros(d_model)
    t["mlp1_w"] = dense(d_model, 2 * d_model)
    t["mlp1_b"] = np.zeros(2 * d_model)
    t["mlp2_w"] = dense(2 * d_model, N_OUT, out_std)
    t["mlp2_b"] = np.zeros(N_OUT)
    t["step_scale"] = np.ones(N_OUT)
    return HeadParams(t, n_heads, cue_dim, feature_dim,
                      DEFAULT_TAU.copy() if tau is None else np.asarray(tau, dtype=float))


# -- windows ----------------------------------------------------------------

@dataclass
class WindowPartition:
    cell_size: float
    origin: np.ndarray
    window_of: np.ndarray          # (N,) window id per Gaussian
    members: List[np.ndarray]      # per window, sorted Gaussian indices
    attended: np.ndarray           # (N,) bool, False for overflow members
    slots: np.ndarray              # (n_windows, K) attended member indices, -1 padded

    @property
    def n_windows(self) -> int:
        return len(self.members)


def build_windows(scene: GaussianScene, cell_size: float, step_index: int = 0,
                  k_win: int = K_WIN) -> WindowPartition:
    """Voxel-grid windows over the scene bounding box, shifted by half a cell on odd steps."""
    if not cell_size > 0:
        raise HeadError("cell_size must be positive")
    n = len(scene)
    pos = scene.positions
    origin = pos.min(axis=0) if n else np.zeros(3)
    if step_index % 2 == 1:
        origin = origin - 0.5 * cell_size
    cells = np.floor((pos - origin) / cell_size).astype(np.int64)
    if n:
        keys, window_of = np.unique(cells, axis=0, return_inverse=True)
        window_of = window_of.reshape(-1)
    else:
        keys, window_of = np.zeros((0, 3), np.int64), np.zeros(0, np.int64)
    order = np.argsort(window_of, kind="stable")
    bounds = np.searchsorted(window_of[order], np.arange(len(keys) + 1))
    members = [order[bounds[w]:bounds[w + 1]] for w in range(len(keys))]
    attended = np.ones(n, dtype=bool)
    kept = []
    for mem in members:
        if len(mem) > k_win:
            # keep the most opaque members, ties to the lower index
            rank = np.argsort(-scene.opacity_logits[mem], kind="stable")
            keep = np.sort(mem[rank[:k_win]])
            attended[np.setdiff1d(mem, keep)] = False
            kept.append(keep)
        else:
            kept.append(mem)
    width = max((len(k) for k in kept), default=0)
    slots = np.full((len(kept), width), -1, dtype=np.int64)
    for w, k in enumerate(kept):
        slots[w, :len(k)] = k
    return WindowPartition(float(cell_size), origin, window_of, members, attended, slots)


def _window_centroids(scene: GaussianScene, window: WindowPartition) -> np.ndarray:
    sums = np.zeros((window.n_windows, 3))
    np.add.at(sums, window.window_of, scene.positions)
    counts = np.bincount(window.window_of, minlength=window.n_windows)
    return sums / np.maximum(counts, 1)[:, None]


# -- tokens -----------------------------------------------------------------

def build_tokens(scene: GaussianScene, obs: np.ndarray, prior: Optional[np.ndarray],
                 window: WindowPartition) -> np.ndarray:
    n = len(scene)
    obs = np.asarray(obs, dtype=float)
    if obs.shape[0] != n:
        raise HeadError(f"observation cues have {obs.shape[0]} rows for {n} Gaussians")
    if prior is None:
        prior = np.zeros_like(obs)
    elif prior.shape != obs.shape:
        raise HeadError("prior cues must match observation cue shape")
    rel = (scene.positions - _window_centroids(scene, window)[window.window_of]) / window.cell_size
    return np.concatenate([rel, scene.log_scales, scene.colors, scene.opacity_logits[:, None],
                           scene.features, obs, prior], axis=1)


def tokens_backward(g_tokens: np.ndarray, window: WindowPartition):
    """Gradient of the token state block w.r.t. (positions, log_scales, colors, opacity_logits)."""
    g_rel = g_tokens[:, 0:3] / window.cell_size
    sums = np.zeros((window.n_windows, 3))
    np.add.at(sums, window.window_of, g_rel)
    counts = np.bincount(window.window_of, minlength=window.n_windows)
    g_pos = g_rel - (sums / np.maximum(counts, 1)[:, None])[window.window_of]
    return g_pos, g_tokens[:, 3:6].copy(), g_tokens[:, 6:9].copy(), g_tokens[:, 9].copy()


# -- network ----------------------------------------------------------------

def _silu(x):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _attend(emb, safe, valid, t, nh, dh, keep):
    """Masked multi-head attention over a block of windows."""
    nw, kw = safe.shape
    d = nh * dh
    e_pad = np.where(valid[..., None], emb[safe], 0.0)
    q = (e_pad @ t["q_w"] + t["q_b"]).reshape(nw, kw, nh, dh)
    k = (e_pad @ t["k_w"] + t["k_b"]).reshape(nw, kw, nh, dh)
    v = (e_pad @ t["v_w"] + t["v_b"]).reshape(nw, kw, nh, dh)
    scores = np.einsum("wqhd,wkhd->whqk", q, k) / np.sqrt(dh)
    scores = np.where(valid[:, None, None, :], scores, -1e30)
    scores = scores - scores.max(axis=-1, keepdims=True)
    a = np.exp(scores)
    a = a / a.sum(axis=-1, keepdims=True)
    o_cat = np.einsum("whqk,wkhd->wqhd", a, v).reshape(nw, kw, d)
    out = o_cat @ t["o_w"] + t["o_b"]
    return out, ((e_pad, q, k, v, a, o_cat) if keep else None)


def head_forward(tokens: np.ndarray, window: WindowPartition, params: HeadParams,
                 scene_extent: float = 1.0, return_cache: bool = False):
    """Residuals ``(N, 10)``, each channel bounded by its clamp ``tau``."""
    t = params.tensors
    n = tokens.shape[0]
    d = params.d_model
    nh = params.n_heads
    dh = d // nh
    tau = params.tau.copy()
    tau[:3] *= scene_extent

    emb = tokens @ t["embed_w"] + t["embed_b"]
    slots = window.slots
    valid = slots >= 0
    att = np.zeros((n, d))
    cache_att = None
    if n and slots.size:
        safe = np.where(valid, slots, 0)
        parts = [_attend(emb, safe[i:i + WIN_CHUNK], valid[i:i + WIN_CHUNK], t, nh, dh,
                         return_cache)
                 for i in range(0, len(slots), WIN_CHUNK)]
        for i, (out, _) in zip(range(0, len(slots), WIN_CHUNK), parts):
            ok = valid[i:i + WIN_CHUNK]
            att[slots[i:i + WIN_CHUNK][ok]] = out[ok]
        if return_cache:
            cols = [np.concatenate(c) for c in zip(*(c for _, c in parts))]
            cache_att = (safe, valid, *cols)
    e1 = emb + att
    z1 = e1 @ t["mlp1_w"] + t["mlp1_b"]
    h1, sig1 = _silu(z1)
    raw = h1 @ t["mlp2_w"] + t["mlp2_b"]
    th = np.tanh(raw * t["step_scale"])
    delta = tau * th
    if not return_cache:
        return delta
    cache = dict(tokens=tokens, emb=emb, e1=e1, z1=z1, h1=h1, sig1=sig1, th=th, tau=tau,
                 att=cache_att, window=window)
    return delta, cache


def head_backward(g_delta: np.ndarray, cache: dict, params: HeadParams):
    """Returns (gradients for every trainable tensor, gradient w.r.t. tokens)."""
    t = params.tensors
    d = params.d_model
    nh = params.n_heads
    dh = d // nh
    g = {}
    g_raw = g_delta * cache["tau"] * (1.0 - cache["th"] ** 2) * t["step_scale"]
    g["mlp2_w"] = cache["h1"].T @ g_raw
    g["mlp2_b"] = g_raw.sum(axis=0)
    g_h1 = g_raw @ t["mlp2_w"].T
    z1, sig1 = cache["z1"], cache["sig1"]
    g_z1 = g_h1 * sig1 * (1.0 + z1 * (1.0 - sig1))
    g["mlp1_w"] = cache["e1"].T @ g_z1
    g["mlp1_b"] = g_z1.sum(axis=0)
    g_e1 = g_z1 @ t["mlp1_w"].T
    g_emb = g_e1.copy()

    for name in ("q", "k", "v", "o"):
        g[f"{name}_w"] = np.zeros_like(t[f"{name}_w"])
        g[f"{name}_b"] = np.zeros_like(t[f"{name}_b"])
    if cache["att"] is not None:
        safe, valid, e_pad, q, k, v, a, o_cat = cache["att"]
        nw, kw = valid.shape
        g_out = np.where(valid[..., None], g_e1[safe], 0.0)
        g["o_w"] = np.einsum("wqi,wqj->ij", o_cat, g_out)
        g["o_b"] = g_out.sum(axis=(0, 1))
        g_o = (g_out @ t["o_w"].T).reshape(nw, kw, nh, dh)
        g_a = np.einsum("wqhd,wkhd->whqk", g_o, v)
        g_v = np.einsum("whqk,wqhd->wkhd", a, g_o)
        g_s = a * (g_a - np.sum(g_a * a, axis=-1, keepdims=True)) / np.sqrt(dh)
        g_q = np.einsum("whqk,wkhd->wqhd", g_s, k).reshape(nw, kw, d)
        g_k = np.einsum("whqk,wqhd->wkhd", g_s, q).reshape(nw, kw, d)
        g_v = g_v.reshape(nw, kw, d)
        g_epad = np.zeros((nw, kw, d))
        for name, gp in (("q", g_q), ("k", g_k), ("v", g_v)):
            g[f"{name}_w"] = np.einsum("wqi,wqj->ij", e_pad, gp)
            g[f"{name}_b"] = np.where(valid[..., None], gp, 0.0).sum(axis=(0, 1))
            g_epad += gp @ t[f"{name}_w"].T
        slots = cache["window"].slots
        g_emb[slots[valid]] += g_epad[valid]

    g["embed_w"] = cache["tokens"].T @ g_emb
    g["embed_b"] = g_emb.sum(axis=0)
    g_tokens = g_emb @ t["embed_w"].T
    return g, g_tokens


# -- state update -----------------------------------------------------------

def update_scene(scene: GaussianScene, delta: np.ndarray) -> GaussianScene:
    n = len(scene)
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (n, N_OUT):
        raise HeadError(f"residual matrix has shape {delta.shape}, expected {(n, N_OUT)}")
    if not np.all(np.isfinite(delta)):
        raise HeadError("non-finite residuals")
    lo, hi = np.log(MIN_SCALE), np.log(scene.scene_extent)
    return scene.replace(
        positions=scene.positions + delta[:, 0:3],
        log_scales=np.clip(scene.log_scales + delta[:, 3:6], lo, hi),
        colors=np.clip(scene.colors + delta[:, 6:9], 0.0, 1.0),
        opacity_logits=scene.opacity_logits + delta[:, 9],
    )


def update_backward(scene: GaussianScene, delta: np.ndarray, g_pos, g_ls, g_col, g_op):
    """Pull gradients on the updated state back to (previous state, residuals).

    Clamped entries pass no gradient.
    """
    lo, hi = np.log(MIN_SCALE), np.log(scene.scene_extent)
    ls = scene.log_scales + delta[:, 3:6]
    col = scene.colors + delta[:, 6:9]
    g_ls = np.where((ls > lo) & (ls < hi), g_ls, 0.0)
    g_col = np.where((col > 0.0) & (col < 1.0), g_col, 0.0)
    g_delta = np.concatenate([g_pos, g_ls, g_col, g_op[:, None]], axis=1)
    return (g_pos, g_ls, g_col, g_op), g_delta
