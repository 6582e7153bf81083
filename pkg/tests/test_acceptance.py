"""Acceptance criteria 1-10.

Each test records one line in ``RESULTS``; ``conftest.py`` prints them at the
end of the session.  Run directly with ``python3 tests/test_acceptance.py``.

Set ``GIFSPLAT_RETRAIN=1`` to retrain the toy head from scratch for
criterion 5 instead of loading the shipped checkpoint (about 11 minutes).
"""

import csv
import filecmp
import json
import os
import sys
import time

import numpy as np
import pytest

from gifsplat.cli import main
from gifsplat.cues import compute_observation_cues, pool_views
from gifsplat.head import HeadParams, init_head_params
from gifsplat.io import scene_from_bytes, scene_to_bytes
from gifsplat.metrics import mse, psnr_from_mse, ssim
from gifsplat.rasterizer import RenderOptions, RenderOutput, render
from gifsplat.refine import RefineConfig, refine
from gifsplat.train import (TOY_HEAD, TRAINABLE, SyntheticSceneSpec, TrainConfig,
                            gradient_descent_baseline, heldout_samples, make_sample,
                            step_psnr_table, toy_head, train_head, unrolled_loss)

from helpers import F64, fd_check_render, front_camera, random_scene

RESULTS = {}


def report(n, name, ok, detail):
    RESULTS[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail}"
    assert ok, RESULTS[n]


@pytest.fixture(scope="module")
def sample():
    return heldout_samples(TrainConfig(n_heldout=1))[0]


def test_c01_rasterizer_gradients():
    start = time.perf_counter()
    ok = total = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        scene = random_scene(rng, int(rng.integers(5, 21)))
        target = rng.uniform(0, 1, (32, 32, 3))
        k, n, _ = fd_check_render(scene, front_camera(32), target, h=1e-4, rel=1e-3, floor=1e-7)
        ok += k
        total += n
    secs = time.perf_counter() - start
    frac = ok / total
    report(1, "rasterizer gradient check", frac >= 0.99 and secs < 120,
           f"{ok}/{total} partials ({100 * frac:.2f}%) within 1e-3 in {secs:.1f}s")


def test_c02_conservation():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(2000 + seed)
        scene = random_scene(rng, int(rng.integers(1, 60)))
        out = render(scene, front_camera(32))
        worst = max(worst, float(np.abs(out.total_weight + out.final_transmittance - 1).max()))
    report(2, "compositing conservation", worst <= 1e-5, f"max |sum w + T - 1| = {worst:.2e}")


def _cue_views(seed, n_views=3):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 15)
    cams = [front_camera(24, dist=3.0 + 0.2 * k) for k in range(n_views)]
    renders = [render(scene, c, F64) for c in cams]
    targets = [np.clip(r.image + rng.normal(0, 0.05, r.image.shape), 0, 1) for r in renders]
    return scene, list(zip(targets, cams)), renders


def test_c03_pooling_identities():
    scene, views, renders = _cue_views(0)
    same = [(r.image, cam) for r, (_, cam) in zip(renders, views)]
    zero_ok = bool(np.all(compute_observation_cues(scene, same, renders) == 0))

    v = np.linspace(-0.5, 0.5, 12)
    diffs = [np.broadcast_to(v, r.image.shape[:2] + (12,)) for r in renders]
    cues, cov = pool_views(renders, diffs, len(scene), 12)
    covered = cov >= 1e-3
    const_err = float(np.abs(cues[covered] - v).max())

    idx = np.array([[[0, 1]], [[0, 1]]])
    wts = np.array([[[0.6, 0.2]], [[0.1, 0.5]]])
    hand = RenderOutput(np.zeros((2, 1, 3)), 1 - wts.sum(-1), idx, wts, np.zeros((2, 1)),
                        wts.sum(-1), 2)
    got, _ = pool_views([hand], [np.array([[[1.0]], [[2.0]]])], 2, 1)
    hand_err = float(np.abs(got[:, 0] - [0.8 / 0.7, 1.2 / 0.7]).max())

    perm = [2, 0, 1]
    a = compute_observation_cues(scene, views, renders)
    b = compute_observation_cues(scene, [views[i] for i in perm], [renders[i] for i in perm])
    perm_err = float(np.abs(a - b).max())

    ok = zero_ok and covered.any() and const_err <= 1e-5 and hand_err <= 1e-6 and perm_err <= 1e-6
    report(3, "pooling identities", ok,
           f"zero exact={zero_ok}, constant {const_err:.1e}, hand {hand_err:.1e}, "
           f"permutation {perm_err:.1e}")


def test_c04_identity_enhancer(sample):
    params = toy_head()
    same = []
    for steps in range(5):
        a, _ = refine(sample.init, sample.views, params, RefineConfig(steps=steps))
        b, _ = refine(sample.init, sample.views, params,
                      RefineConfig(steps=steps, mode="gifsplat"))
        same.append(scene_to_bytes(a) == scene_to_bytes(b))
    report(4, "identity-enhancer equivalence", all(same),
           f"byte-identical for T=0..4: {same}")


def test_c05_step_gain():
    cfg = TrainConfig()
    if os.environ.get("GIFSPLAT_RETRAIN"):
        start = time.perf_counter()
        params, _ = train_head(cfg)
        minutes = (time.perf_counter() - start) / 60
        retrain = f", retrained in {minutes:.1f} min, matches shipped={params.equals(toy_head())}"
        within = minutes <= 30
    else:
        params, retrain, within = toy_head(), ", shipped checkpoint", True
    table = step_psnr_table(params, heldout_samples(cfg), cfg, 4)
    m = table.mean(0)
    gains = np.diff(m)
    gain03 = m[3] - m[0]
    ratio = gains[3] / gains[2]
    ok = (len(table) >= 20 and gain03 >= 0.5 and bool(np.all(gains >= 0))
          and ratio <= 0.5 and within)
    report(5, "step-gain trend", ok,
           f"{len(table)} scenes, mean PSNR t=0..4 "
           + " ".join(f"{x:.2f}" for x in m)
           + f", 0->3 +{gain03:.2f} dB, (3->4)/(2->3) = {ratio:.2f}{retrain}")


def _rsq(x, y):
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return 1 - float(np.sum(resid ** 2) / np.sum((y - y.mean()) ** 2))


def test_c06_runtime_linearity(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--seed", "3"]) == 0
    d = tmp_path / "d"
    assert main(["bench", "--scene", str(d / "init.gspl"), "--data", str(d),
                 "--head", str(TOY_HEAD), "--out", str(tmp_path / "b.csv"),
                 "--repeats", "5", "--steps-list", "1,2,3,4,5,6"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    ts = np.array([float(r["T"]) for r in rows])
    secs = np.array([float(r["mean_seconds"]) for r in rows])
    peaks = np.array([float(r["peak_bytes"]) for r in rows])
    r2 = _rsq(ts, secs)
    mem = abs(peaks[-1] - peaks[0]) / peaks[0]
    report(6, "runtime linearity", r2 >= 0.95 and mem <= 0.05,
           f"R^2 = {r2:.4f} over T=1..6, peak memory T=1 vs T=6 differs by {100 * mem:.2f}%")


def _photometric(scene, views):
    return float(np.mean([mse(render(scene, cam).image, img) for img, cam in views]))


def test_c07_descent_baseline(sample):
    start = time.perf_counter()
    refine(sample.init, sample.views, toy_head(), RefineConfig(steps=3))
    t_refine = time.perf_counter() - start
    res = gradient_descent_baseline(sample.init, sample.views, 500, 5.0)
    before, after = _photometric(sample.init, sample.views), _photometric(res.scene, sample.views)
    drop = 1 - after / before
    ratio = res.seconds / t_refine
    report(7, "descent baseline", not res.diverged and drop >= 0.5 and ratio >= 10,
           f"MSE {before:.3g} -> {after:.3g} ({100 * drop:.1f}% lower) in {res.seconds:.1f}s, "
           f"{ratio:.0f}x the T=3 refine ({t_refine:.3f}s)")


def test_c08_head_training_gradients():
    spec = SyntheticSceneSpec(n_min=5, n_max=5, n_cameras=2, width=16, height=16,
                              scale_range=(0.2, 0.35))
    cfg = TrainConfig(steps=2, precision="float64", d_model=8, n_heads=2, cell_size=0.6)
    s = make_sample(spec, 3, RenderOptions(precision="float64"))
    p = init_head_params(12, 12, 8, 2, seed=1, out_std=0.3)
    _, grads, frozen = unrolled_loss(p, s, cfg)
    h = 1e-5
    ok = total = 0
    for k in TRAINABLE:
        for idx in np.ndindex(p.tensors[k].shape):
            t = p.tensors[k].copy()
            t[idx] += h
            lp = unrolled_loss(p.with_tensors({k: t}), s, cfg, frozen, False)[0]
            t[idx] -= 2 * h
            lm = unrolled_loss(p.with_tensors({k: t}), s, cfg, frozen, False)[0]
            fd = (lp - lm) / (2 * h)
            an = grads[k][idx]
            total += 1
            ok += abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) + 1e-9
    report(8, "head training-gradient check", ok == total,
           f"{ok}/{total} HeadParams partials within 1e-3 (5 Gaussians, 2 views, T=2)")


def test_c09_metrics():
    p = psnr_from_mse(0.01)
    a = np.random.default_rng(9).uniform(0, 1, (20, 20, 3))
    s_same = ssim(a, a)
    closed = (2 * 0.125 + 1e-4) / (0.3125 + 1e-4)
    s_const = ssim(np.full((16, 16, 3), 0.5), np.full((16, 16, 3), 0.25))
    ok = p == 20.0 and s_same == pytest.approx(1.0, abs=1e-12) and abs(s_const - closed) <= 1e-4
    report(9, "metric correctness", ok,
           f"PSNR(0.01) = {p!r}, SSIM(x, x) = {s_same:.12f}, constant SSIM {s_const:.6f} "
           f"vs closed form {closed:.6f}")


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


SMALL = ["--set", "width=16", "--set", "height=16", "--set", "n_min=20", "--set", "n_max=25"]


def _drop_wallclock(obj):
    if isinstance(obj, dict):
        return {k: _drop_wallclock(v) for k, v in obj.items() if k != "seconds"}
    if isinstance(obj, list):
        return [_drop_wallclock(v) for v in obj]
    return obj


def _run_all(root, threads):
    """Every command once, then wall-clock measurements are removed from the outputs.

    Timings are the one output that cannot repeat: the bench CSV keeps only its
    T column and JSON logs lose their ``seconds`` fields.
    """
    d = root / "data"
    th = ["--threads", str(threads)]
    cmds = [
        ["synth", "--out", d, "--seed", 5, *SMALL],
        ["init", "--data", d, "--out", root / "init.gspl"],
        ["refine", "--scene", d / "init.gspl", "--data", d, "--out", root / "r1.gspl",
         "--trace", root / "r1.json", "--head", TOY_HEAD, "--dump-steps", root / "dump"],
        ["refine", "--scene", d / "init.gspl", "--data", d, "--out", root / "r2.gspl",
         "--mode", "gifsplat", "--enhancer", "unsharp", "--seed", 2],
        ["train", "--out", root / "h.bin", "--log", root / "h.json", "--iterations", 2,
         "--set", "n_scenes=2", "--set", "n_heldout=1", "--set", "d_model=8",
         "--set", "n_heads=2", *SMALL],
        ["baseline", "--scene", d / "init.gspl", "--data", d, "--out", root / "b.gspl",
         "--curve", root / "b.csv", "--steps", 5],
        ["eval", "--scene", root / "r1.gspl", "--data", d, "--out", root / "e.json",
         "--table", root / "e.txt"],
        ["bench", "--scene", d / "init.gspl", "--data", d, "--out", root / "bench.csv",
         "--repeats", 1, "--steps-list", "1,2"],
    ]
    codes = [main([str(x) for x in c] + th) for c in cmds]
    rows = list(csv.reader(open(root / "bench.csv")))
    (root / "bench.csv").write_text("\n".join(r[0] for r in rows) + "\n")
    for path in root.glob("*.json"):
        path.write_text(json.dumps(_drop_wallclock(json.loads(path.read_text()))))
    return codes


def test_c10_serialization_and_determinism(tmp_path):
    rng = np.random.default_rng(10)
    scene = random_scene(rng, 30)
    scene_ok = scene_to_bytes(scene_from_bytes(scene_to_bytes(scene))) == scene_to_bytes(scene)
    params = init_head_params(12, 12, 16, 2, seed=10)
    params.save(tmp_path / "p.bin")
    head_ok = HeadParams.load(tmp_path / "p.bin").equals(params)

    runs = [tmp_path / "run1", tmp_path / "run2", tmp_path / "run3"]
    codes = [_run_all(r, t) for r, t in zip(runs, (1, 1, 2))]
    all_zero = all(c == 0 for cs in codes for c in cs)
    same = _same_tree(runs[0], runs[1]) and _same_tree(runs[0], runs[2])
    report(10, "serialization and determinism", scene_ok and head_ok and all_zero and same,
           f"scene round trip={scene_ok}, head round trip={head_ok}, 8 commands exit 0="
           f"{all_zero}, identical outputs across runs and 1/2 threads={same} "
           f"(wall-clock fields excluded)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
