"""Tile-based EWA splatting with front-to-back alpha compositing.

Each Gaussian is projected with the local-affine Jacobian at its mean, binned
into 16x16 pixel tiles by its 3-sigma screen box, and composited per pixel in
view-depth order (ties broken by index).  ``render_backward`` recomputes the
forward pass tile by tile and returns exact reverse-mode gradients.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import QUAT_QUADRATIC_FORM, Camera, GaussianScene, GeometryError

TILE = 16
ALPHA_MAX = 0.999
T_MIN = 1e-4
SUPPORT_SIGMA2 = 9.0  # 3 sigma, squared Mahalanobis radius
DILATION = 0.3


@dataclass(frozen=True)
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01
    k_top: int = 16
    precision: str = "float32"
    threads: int = 1

    @property
    def dtype(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        return np.dtype(self.precision)


@dataclass
class RenderOutput:
    image: np.ndarray               # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    contrib_index: np.ndarray       # (H, W, K) Gaussian index, -1 = empty slot
    contrib_weight: np.ndarray      # (H, W, K) compositing weight w_i(u)
    depth: np.ndarray               # (H, W) expected depth, 0 where uncovered
    total_weight: np.ndarray        # (H, W) sum of all weights before truncation
    n_gaussians: int

    @property
    def shape(self):
        return self.final_transmittance.shape


@dataclass
class SceneGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SceneGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros((n, 3)), np.zeros(n))

    def __add__(self, other: "SceneGradients") -> "SceneGradients":
        return SceneGradients(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def scaled(self, s: float) -> "SceneGradients":
        return SceneGradients(*(a * s for a in self.as_tuple()))

    def as_tuple(self):
        return (self.positions, self.log_scales, self.rotations, self.colors,
                self.opacity_logits)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(len(self.opacity_logits), -1)
                               for a in self.as_tuple()], axis=1)


class _Projection(NamedTuple):
    ids: np.ndarray        # visible Gaussian indices, depth sorted
    mean2d: np.ndarray     # (M, 2)
    conic: np.ndarray      # (M, 2, 2)
    opacity: np.ndarray    # (M,)
    depth: np.ndarray      # (M,)
    bbox: np.ndarray       # (M, 4) xmin, xmax, ymin, ymax (inclusive pixel range)
    # quantities reused by the backward pass
    pc: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray
    rot: np.ndarray
    var: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    cov2d: np.ndarray


def _project(scene: GaussianScene, camera: Camera, opts: RenderOptions) -> _Projection:
    dt = opts.dtype
    scene.check_finite()
    w_rot = camera.rotation.astype(dt)
    pc = scene.positions.astype(dt) @ w_rot.T + camera.translation.astype(dt)
    order = np.argsort(pc[:, 2], kind="stable")
    ids = order[pc[order, 2] >= opts.near]
    pc = pc[ids]
    q = scene.rotations[ids].astype(dt)
    qnorm = np.linalg.norm(q, axis=1)
    qn = q / qnorm[:, None]
    w, x, y, z = qn.T
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=1).reshape(-1, 3, 3)
    var = np.exp(2 * scene.log_scales[ids].astype(dt))
    cov3 = (rot * var[:, None, :]) @ rot.transpose(0, 2, 1)
    cov_cam = w_rot @ cov3 @ w_rot.T
    fx, fy = dt.type(camera.fx), dt.type(camera.fy)
    X, Y, Z = pc.T
    jac = np.zeros((len(ids), 2, 3), dtype=dt)
    jac[:, 0, 0] = fx / Z
    jac[:, 0, 2] = -fx * X / (Z * Z)
    jac[:, 1, 1] = fy / Z
    jac[:, 1, 2] = -fy * Y / (Z * Z)
    cov2d = jac @ cov_cam @ jac.transpose(0, 2, 1)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c, -b, -b, a], axis=1).reshape(-1, 2, 2) / det[:, None, None]
    mean2d = np.stack([fx * X / Z + dt.type(camera.cx), fy * Y / Z + dt.type(camera.cy)], axis=1)
    # 3-sigma radius of the dilated footprint along its major axis
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0))
    rad = 3.0 * np.sqrt(lam)
    bbox = np.stack([np.floor(mean2d[:, 0] - rad), np.ceil(mean2d[:, 0] + rad),
                     np.floor(mean2d[:, 1] - rad), np.ceil(mean2d[:, 1] + rad)], axis=1)
    with np.errstate(over="ignore"):      # exp overflow saturates to opacity 0
        opacity = 1.0 / (1.0 + np.exp(-scene.opacity_logits[ids].astype(dt)))
    return _Projection(ids, mean2d, conic, opacity, Z.copy(), bbox, pc, jac, cov_cam,
                       rot, var, qn, qnorm, cov2d)


def _tiles(camera: Camera):
    for y0 in range(0, camera.height, TILE):
        for x0 in range(0, camera.width, TILE):
            yield x0, min(x0 + TILE, camera.width), y0, min(y0 + TILE, camera.height)


class _TileState(NamedTuple):
    local: np.ndarray      # indices into the projection arrays, depth order
    dx: np.ndarray
    dy: np.ndarray
    maha: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray
    live: np.ndarray       # density term differentiable (inside support, unclamped)
    t_before: np.ndarray
    active: np.ndarray
    weight: np.ndarray
    t_final: np.ndarray


def _tile_state(proj: _Projection, tile, dt) -> Optional[_TileState]:
    x0, x1, y0, y1 = tile
    bb = proj.bbox
    local = np.nonzero((bb[:, 1] >= x0) & (bb[:, 0] <= x1 - 1)
                       & (bb[:, 3] >= y0) & (bb[:, 2] <= y1 - 1))[0]
    if local.size == 0:
        return None
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.reshape(-1).astype(dt)
    py = ys.reshape(-1).astype(dt)
    m = proj.mean2d[local]
    con = proj.conic[local]
    dx = px[:, None] - m[None, :, 0]
    dy = py[:, None] - m[None, :, 1]
    maha = (con[None, :, 0, 0] * dx * dx + 2 * con[None, :, 0, 1] * dx * dy
            + con[None, :, 1, 1] * dy * dy)
    inside = maha <= SUPPORT_SIGMA2
    gauss = np.exp(-0.5 * maha)
    raw = proj.opacity[local][None, :] * gauss
    live = inside & (raw < ALPHA_MAX)
    alpha = np.where(inside, np.minimum(raw, ALPHA_MAX), 0).astype(dt)
    one_minus = 1 - alpha
    t_incl = np.cumprod(one_minus, axis=1)
    t_before = np.empty_like(t_incl)
    t_before[:, 0] = 1
    t_before[:, 1:] = t_incl[:, :-1]
    active = t_before >= T_MIN
    weight = np.where(active, alpha * t_before, 0).astype(dt)
    t_final = np.prod(np.where(active, one_minus, 1), axis=1)
    return _TileState(local, dx, dy, maha, gauss, alpha, live, t_before, active, weight, t_final)


def _map_tiles(fn, tiles, threads: int):
    if threads <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tiles))


def render(scene: GaussianScene, camera: Camera,
           opts: Optional[RenderOptions] = None) -> RenderOutput:
    opts = opts or RenderOptions()
    dt = opts.dtype
    h, w, k = camera.height, camera.width, opts.k_top
    bg = np.asarray(opts.background, dtype=dt)
    proj = _project(scene, camera, opts)
    colors = scene.colors[proj.ids].astype(dt)

    image = np.empty((h, w, 3), dtype=dt)
    image[:] = bg
    t_final = np.ones((h, w), dtype=dt)
    total = np.zeros((h, w), dtype=dt)
    depth = np.zeros((h, w), dtype=dt)
    cidx = np.full((h, w, k), -1, dtype=np.int64)
    cw = np.zeros((h, w, k), dtype=dt)

    def run(tile):
        st = _tile_state(proj, tile, dt)
        if st is None:
            return tile, None
        wsum = st.weight.sum(axis=1)
        rgb = st.weight @ colors[st.local] + st.t_final[:, None] * bg
        zsum = st.weight @ proj.depth[st.local]
        dep = np.where(wsum > 0, zsum / np.where(wsum > 0, wsum, 1), 0)
        kk = min(k, st.local.size)
        top = np.argsort(-st.weight, axis=1, kind="stable")[:, :kk]
        tw = np.take_along_axis(st.weight, top, axis=1)
        ti = np.where(tw > 0, proj.ids[st.local][top], -1)
        return tile, (rgb, st.t_final, wsum, dep, ti, np.where(tw > 0, tw, 0), kk)

    for tile, res in _map_tiles(run, list(_tiles(camera)), opts.threads):
        if res is None:
            continue
        x0, x1, y0, y1 = tile
        th, tw_ = y1 - y0, x1 - x0
        rgb, tf, wsum, dep, ti, tw, kk = res
        image[y0:y1, x0:x1] = rgb.reshape(th, tw_, 3)
        t_final[y0:y1, x0:x1] = tf.reshape(th, tw_)
        total[y0:y1, x0:x1] = wsum.reshape(th, tw_)
        depth[y0:y1, x0:x1] = dep.reshape(th, tw_)
        cidx[y0:y1, x0:x1, :kk] = ti.reshape(th, tw_, kk)
        cw[y0:y1, x0:x1, :kk] = tw.reshape(th, tw_, kk)
    return RenderOutput(image, t_final, cidx, cw, depth, total, len(scene))


def render_backward(scene: GaussianScene, camera: Camera, upstream: np.ndarray,
                    opts: Optional[RenderOptions] = None) -> SceneGradients:
    """Gradients of ``sum(upstream * render(scene).image)`` w.r.t. all parameters."""
    opts = opts or RenderOptions()
    dt = opts.dtype
    upstream = np.asarray(upstream)
    if upstream.shape != (camera.height, camera.width, 3):
        raise ValueError(f"upstream has shape {upstream.shape}, expected "
                         f"{(camera.height, camera.width, 3)}")
    n = len(scene)
    grads = SceneGradients.zeros(n)
    if n == 0 or not np.any(upstream):
        return grads
    upstream = upstream.astype(dt)
    bg = np.asarray(opts.background, dtype=dt)
    proj = _project(scene, camera, opts)
    m = len(proj.ids)
    colors = scene.colors[proj.ids].astype(dt)
    sig = proj.opacity

    def run(tile):
        st = _tile_state(proj, tile, dt)
        if st is None:
            return None
        x0, x1, y0, y1 = tile
        g = upstream[y0:y1, x0:x1].reshape(-1, 3)
        col = colors[st.local]
        g_color = st.weight.T @ g
        cg = g @ col.T                          # (P, M) c_i . g_u
        q = st.weight * cg
        after = np.cumsum(q[:, ::-1], axis=1)[:, ::-1] - q   # sum over later Gaussians
        bg_term = st.t_final * (g @ bg)
        g_alpha = np.where(
            st.active, st.t_before * cg - (after + bg_term[:, None]) / (1 - st.alpha), 0)
        g_alpha = np.where(st.live, g_alpha, 0)
        op = sig[st.local]
        g_oplogit = (g_alpha * st.gauss).sum(axis=0) * op * (1 - op)
        g_maha = -0.5 * g_alpha * op[None, :] * st.gauss
        con = proj.conic[st.local]
        dx, dy = st.dx, st.dy
        g_conic = np.stack([(g_maha * dx * dx).sum(0), (g_maha * dx * dy).sum(0),
                            (g_maha * dx * dy).sum(0), (g_maha * dy * dy).sum(0)],
                           axis=1).reshape(-1, 2, 2)
        g_mx = -(g_maha * 2 * (con[None, :, 0, 0] * dx + con[None, :, 0, 1] * dy)).sum(0)
        g_my = -(g_maha * 2 * (con[None, :, 0, 1] * dx + con[None, :, 1, 1] * dy)).sum(0)
        return st.local, g_color, g_oplogit, g_conic, np.stack([g_mx, g_my], axis=1)

    g_color = np.zeros((m, 3), dtype=dt)
    g_oplogit = np.zeros(m, dtype=dt)
    g_conic = np.zeros((m, 2, 2), dtype=dt)
    g_mean = np.zeros((m, 2), dtype=dt)
    # partial sums merged in fixed tile order
    for res in _map_tiles(run, list(_tiles(camera)), opts.threads):
        if res is None:
            continue
        local, gc, go, gk, gm = res
        g_color[local] += gc
        g_oplogit[local] += go
        g_conic[local] += gk
        g_mean[local] += gm

    con = proj.conic
    g_cov2d = -con @ g_conic @ con
    g_cov2d = 0.5 * (g_cov2d + g_cov2d.transpose(0, 2, 1))
    jac, cov_cam = proj.jac, proj.cov_cam
    g_jac = 2 * g_cov2d @ jac @ cov_cam
    g_covcam = jac.transpose(0, 2, 1) @ g_cov2d @ jac
    w_rot = camera.rotation.astype(dt)
    g_cov3 = w_rot.T @ g_covcam @ w_rot
    rot, var = proj.rot, proj.var
    g_rot = 2 * (g_cov3 @ rot) * var[:, None, :]
    g_var = np.einsum("nab,nac,nbc->nc", g_cov3, rot, rot)
    g_logscale = 2 * var * g_var
    g_qn = 2 * np.einsum("nab,abij,nj->ni", g_rot, QUAT_QUADRATIC_FORM.astype(dt), proj.qn)
    g_q = (g_qn - proj.qn * np.sum(proj.qn * g_qn, axis=1, keepdims=True)) / proj.qnorm[:, None]

    fx, fy = dt.type(camera.fx), dt.type(camera.fy)
    X, Y, Z = proj.pc.T
    gmx, gmy = g_mean[:, 0], g_mean[:, 1]
    gj = g_jac
    g_pc = np.stack([
        gmx * fx / Z - gj[:, 0, 2] * fx / Z ** 2,
        gmy * fy / Z - gj[:, 1, 2] * fy / Z ** 2,
        -gmx * fx * X / Z ** 2 - gmy * fy * Y / Z ** 2
        - gj[:, 0, 0] * fx / Z ** 2 - gj[:, 1, 1] * fy / Z ** 2
        + gj[:, 0, 2] * 2 * fx * X / Z ** 3 + gj[:, 1, 2] * 2 * fy * Y / Z ** 3,
    ], axis=1)
    g_pos = g_pc @ w_rot

    ids = proj.ids
    grads.positions[ids] = g_pos
    grads.log_scales[ids] = g_logscale
    grads.rotations[ids] = g_q
    grads.colors[ids] = g_color
    grads.opacity_logits[ids] = g_oplogit
    return grads


def pool_over_pixels(output: RenderOutput, per_pixel: np.ndarray):
    """Scatter a per-pixel buffer onto Gaussians with the truncated weights.

    Returns ``(weighted_sums (N, D), weight_sums (N,))`` where row ``i`` holds
    ``sum_u w_i(u) v(u)`` and ``sum_u w_i(u)``.
    """
    per_pixel = np.asarray(per_pixel, dtype=float)
    h, w = output.shape
    if per_pixel.ndim == 2:
        per_pixel = per_pixel[..., None]
    if per_pixel.shape[:2] != (h, w):
        raise ValueError(f"buffer of shape {per_pixel.shape} does not match render {h}x{w}")
    n = output.n_gaussians
    d = per_pixel.shape[2]
    idx = output.contrib_index.reshape(h * w, -1)
    wts = output.contrib_weight.reshape(h * w, -1).astype(float)
    valid = idx >= 0
    pix = np.nonzero(valid)[0]
    gid = idx[valid]
    wv = wts[valid]
    vals = per_pixel.reshape(h * w, d)[pix]
    sums = np.stack([np.bincount(gid, weights=wv * vals[:, j], minlength=n)
                     for j in range(d)], axis=1) if d else np.zeros((n, 0))
    wsum = np.bincount(gid, weights=wv, minlength=n)
    return sums.reshape(n, d), wsum

