"""Scene and camera value types plus the small amount of rotation math shared
by every other module.

Gaussians are stored structure-of-arrays: a ``GaussianScene`` holds one array
per attribute rather than a list of ``Gaussian`` records, so rendering and the
update head can vectorize over the whole scene.  ``GaussianScene.gaussian(i)``
returns a single record when one is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import numpy as np

QUAT_TOL = 1e-6
MIN_SCALE = 1e-6


class GeometryError(ValueError):
    """Raised for invalid geometric input (non-finite values, bad rotations)."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} contains non-finite values")


# Homogeneous quadratic form of the rotation matrix: R[a, b] = q^T C[a, b] q
# for a unit quaternion q = (w, x, y, z). Used for analytic quaternion gradients.
_QUAD = np.zeros((3, 3, 4, 4))
for (_a, _b), _terms in {
    (0, 0): [(0, 0, 1), (1, 1, 1), (2, 2, -1), (3, 3, -1)],
    (0, 1): [(1, 2, 2), (0, 3, -2)],
    (0, 2): [(1, 3, 2), (0, 2, 2)],
    (1, 0): [(1, 2, 2), (0, 3, 2)],
    (1, 1): [(0, 0, 1), (1, 1, -1), (2, 2, 1), (3, 3, -1)],
    (1, 2): [(2, 3, 2), (0, 1, -2)],
    (2, 0): [(1, 3, 2), (0, 2, -2)],
    (2, 1): [(2, 3, 2), (0, 1, 2)],
    (2, 2): [(0, 0, 1), (1, 1, -1), (2, 2, -1), (3, 3, 1)],
}.items():
    for _i, _j, _c in _terms:
        _QUAD[_a, _b, _i, _j] += 0.5 * _c
        _QUAD[_a, _b, _j, _i] += 0.5 * _c
QUAT_QUADRATIC_FORM = _QUAD


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``.

    Accepts a single quaternion ``(4,)`` or a batch ``(N, 4)``.
    """
    q = np.asarray(q, dtype=float)
    _check_finite("quaternion", q)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > QUAT_TOL):
        raise GeometryError("quaternion is not unit length")
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(r) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    r = np.asarray(r, dtype=float)
    _check_finite("rotation", r)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def normalize_quats(q: np.ndarray, tol: float = QUAT_TOL) -> np.ndarray:
    """Renormalize quaternions whose norm drifted by more than ``tol``.

    Rows already within tolerance are returned untouched so that values read
    back from float32 files survive a save/load cycle bit-exactly.
    """
    q = np.array(q, dtype=float)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise GeometryError("zero-norm quaternion")
    drift = np.abs(norms - 1.0) > tol
    return np.where(drift, q / norms, q)


def slerp_quat(q0, q1, t: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 0.9995:
        q = q0 + t * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / s


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def gaussian_covariance(g: Gaussian) -> np.ndarray:
    """World-space covariance ``R diag(exp(2 log_scale)) R^T``."""
    ls = np.asarray(g.log_scale, dtype=float)
    _check_finite("log_scale", ls)
    r = quat_to_rotmat(g.rotation)
    cov = (r * np.exp(2.0 * ls)) @ r.T
    return 0.5 * (cov + cov.T)


def _as_rows(features, n: int) -> np.ndarray:
    f = np.array(features, dtype=float)
    return f.reshape(n, -1) if f.ndim < 2 else f


@dataclass(frozen=True)
class GaussianScene:
    """N Gaussians plus an ``N x D_f`` per-Gaussian feature matrix."""

    positions: np.ndarray          # (N, 3)
    log_scales: np.ndarray         # (N, 3)
    rotations: np.ndarray          # (N, 4) unit quaternions (w, x, y, z)
    colors: np.ndarray             # (N, 3) RGB in [0, 1]
    opacity_logits: np.ndarray     # (N,)
    features: np.ndarray           # (N, D_f)
    scene_extent: float

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (self.positions, (n, 3)),
            "log_scales": (self.log_scales, (n, 3)),
            "rotations": (self.rotations, (n, 4)),
            "colors": (self.colors, (n, 3)),
            "opacity_logits": (self.opacity_logits, (n,)),
        }
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise GeometryError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GeometryError("features row count must equal the number of Gaussians")
        if not self.scene_extent > 0:
            raise GeometryError("scene_extent must be positive")

    @classmethod
    def empty(cls, feature_dim: int = 0, scene_extent: float = 1.0) -> "GaussianScene":
        return cls.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                               np.zeros((0, 3)), np.zeros(0), np.zeros((0, feature_dim)),
                               scene_extent)

    @classmethod
    def from_arrays(cls, positions, log_scales, rotations, colors, opacity_logits,
                    features=None, scene_extent: float = 1.0) -> "GaussianScene":
        positions = np.array(positions, dtype=float).reshape(-1, 3)
        n = positions.shape[0]
        if features is None:
            features = np.zeros((n, 0))
        return cls(
            positions=positions,
            log_scales=np.array(log_scales, dtype=float).reshape(n, 3),
            rotations=normalize_quats(np.array(rotations, dtype=float).reshape(n, 4)),
            colors=np.array(colors, dtype=float).reshape(n, 3),
            opacity_logits=np.array(opacity_logits, dtype=float).reshape(n),
            features=_as_rows(features, n),
            scene_extent=float(scene_extent),
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.log_scales[i].copy(),
                        self.rotations[i].copy(), self.colors[i].copy(),
                        float(self.opacity_logits[i]))

    def replace(self, **changes) -> "GaussianScene":
        return replace(self, **changes)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.positions.copy(), self.log_scales.copy(),
                             self.rotations.copy(), self.colors.copy(),
                             self.opacity_logits.copy(), self.features.copy(),
                             self.scene_extent)

    def check_finite(self) -> None:
        for name in ("positions", "log_scales", "rotations", "colors", "opacity_logits"):
            arr = getattr(self, name)
            fin = np.isfinite(arr)
            bad = ~(np.all(fin, axis=1) if fin.ndim > 1 else fin)
            if np.any(bad):
                raise GeometryError(
                    f"Gaussian {int(np.argmax(bad))} has non-finite {name}")

    def equals(self, other: "GaussianScene") -> bool:
        """Bit-exact comparison of every array and the extent."""
        return (self.scene_extent == other.scene_extent and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("positions", "log_scales", "rotations", "colors",
                      "opacity_logits", "features")))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera frame.

    Pixel ``(u, v)`` samples the image at column ``u``, row ``v``, and the
    camera looks down +z.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        _check_finite("camera rotation", rot)
        _check_finite("camera translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise GeometryError("image size must be positive")
        if (np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6
                or abs(np.linalg.det(rot) - 1.0) > 1e-6):
            raise GeometryError("camera rotation is not a proper rotation")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(fx, fy, cx, cy, width, height, rot, -rot @ eye)


def interpolate_cameras(a: Camera, b: Camera, t: float) -> Camera:
    """Slerp the orientations, lerp translation and intrinsics."""
    if not 0.0 <= t <= 1.0:
        raise GeometryError(f"interpolation parameter {t} outside [0, 1]")
    if (a.width, a.height) != (b.width, b.height):
        raise GeometryError("cameras have different image sizes")
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    q = slerp_quat(rotmat_to_quat(a.rotation), rotmat_to_quat(b.rotation), t)
    rot = quat_to_rotmat(q)
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt

    def lerp(x, y):
        return (1 - t) * x + t * y

    return Camera(lerp(a.fx, b.fx), lerp(a.fy, b.fy), lerp(a.cx, b.cx), lerp(a.cy, b.cy),
                  a.width, a.height, rot, lerp(a.translation, b.translation))


def sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def check_rgb(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must be an H x W x 3 array, got {image.shape}")
    return image

