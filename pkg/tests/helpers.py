"""Small scene and camera builders shared by the test modules."""

import numpy as np

from gifsplat.core import Camera, GaussianScene
from gifsplat.rasterizer import RenderOptions, render

F64 = RenderOptions(precision="float64")


def front_camera(size=32, dist=3.0, focal=32.0):
    """Camera on -z looking at the origin, principal point on the pixel grid."""
    return Camera.look_at([0.0, 0.0, -dist], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0],
                          focal, focal, size / 2, size / 2, size, size)


def random_scene(rng, n, feature_dim=0, spread=0.4, scale=(0.1, 0.3)):
    return GaussianScene.from_arrays(
        rng.normal(0.0, spread, (n, 3)), np.log(rng.uniform(*scale, (n, 3))),
        rng.normal(size=(n, 4)), rng.uniform(0.0, 1.0, (n, 3)), rng.normal(0.5, 1.0, n),
        rng.normal(size=(n, feature_dim)) if feature_dim else None, 1.0)


def single_scene(positions, sigma, opacities, colors, extent=1.0):
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(positions)
    op = np.asarray(opacities, dtype=float).reshape(n)
    return GaussianScene.from_arrays(
        positions, np.full((n, 3), np.log(sigma)), np.tile([1.0, 0, 0, 0], (n, 1)),
        np.asarray(colors, dtype=float).reshape(n, 3), np.log(op / (1 - op)), None, extent)


def fd_check_render(scene, camera, target, h=1e-4, rel=1e-3, floor=1e-7):
    """Compare render_backward of an MSE loss with central differences.

    Returns ``(n_ok, n_total, worst)`` where ``worst`` lists the failing entries.
    """
    from gifsplat.rasterizer import render_backward

    def loss(s):
        return float(np.mean((render(s, camera, F64).image - target) ** 2))

    out = render(scene, camera, F64)
    up = 2.0 * (out.image - target) / out.image.size
    grads = render_backward(scene, camera, up, F64)
    ok = total = 0
    bad = []
    for name in ("positions", "log_scales", "rotations", "colors", "opacity_logits"):
        arr = getattr(scene, name)
        ga = getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            a = arr.copy()
            a[idx] += h
            lp = loss(scene.replace(**{name: a}))
            a[idx] -= 2 * h
            lm = loss(scene.replace(**{name: a}))
            fd = (lp - lm) / (2 * h)
            total += 1
            if abs(fd - ga[idx]) <= rel * max(abs(fd), abs(ga[idx])) + floor:
                ok += 1
            else:
                bad.append((name, idx, fd, ga[idx]))
    return ok, total, bad
