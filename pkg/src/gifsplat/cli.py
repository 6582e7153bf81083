"""``gifsplat`` command line: synth, init, refine, train, baseline, eval, bench.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric failure, 4 enhancer failure.
"""

from __future__ import annotations

import argparse
import csv
import gc
import json
import logging
import sys
import time
import tracemalloc
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .core import GeometryError
from .enhancer import EnhancerError
from .head import HeadError, HeadParams, init_head_params
from .io import (FormatError, atomic_write, load_cameras, load_depth, load_image_raw, load_png, load_scene,
                 save_cameras, save_depth, save_image_raw, save_png, save_scene)
from .metrics import evaluate
from .rasterizer import render
from .refine import RefineError, initialize_from_depth, refine
from .train import TrainingError, gradient_descent_baseline, make_sample, train_head

logger = logging.getLogger("gifsplat")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_ENHANCER = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- dataset directory layout ---------------------------------------------------
#   <dir>/scene.gspl       ground truth        <dir>/init.gspl   degraded start
#   <dir>/cameras.json     <dir>/images/view_###.png     <dir>/depth/view_###.dpth
#   <dir>/images/view_###.f32  optional lossless copy, preferred over the PNG

def _image_paths(data: Path) -> List[Path]:
    return sorted((data / "images").glob("view_*.png"))


def load_views(data) -> list:
    data = Path(data)
    cams = load_cameras(data / "cameras.json")
    paths = _image_paths(data)
    if len(paths) != len(cams):
        raise FormatError(f"{data}: {len(cams)} cameras but {len(paths)} images")
    views = []
    for p, c in zip(paths, cams):
        raw = p.with_suffix(".f32")
        img = load_image_raw(raw) if raw.exists() else load_png(p)
        if img.shape[:2] != (c.height, c.width):
            raise FormatError(f"{p} does not match its camera resolution")
        views.append((img, c))
    return views


def _write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _load_head(path: Optional[str], refine_cfg, seed: int) -> HeadParams:
    if path:
        return HeadParams.load(path)
    c = refine_cfg.features.channels
    return init_head_params(c, c, seed=seed)


# -- commands ---------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    spec = cfgmod.synth_spec(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    opts = cfgmod.render_options(cfg, args.threads)
    sample = make_sample(spec, seed, opts, cfgmod.feature_spec(cfg))
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    save_scene(out / "scene.gspl", sample.truth.scene)
    save_scene(out / "init.gspl", sample.init)
    save_cameras(out / "cameras.json", sample.truth.cameras)
    for i, (img, dep) in enumerate(zip(sample.truth.images, sample.truth.depths)):
        save_png(out / "images" / f"view_{i:03d}.png", img)
        save_image_raw(out / "images" / f"view_{i:03d}.f32", img)
        save_depth(out / "depth" / f"view_{i:03d}.dpth", dep)
    print(f"wrote {len(sample.truth.scene)} Gaussians and {len(sample.truth.cameras)} views "
          f"to {out}")
    return 0


def cmd_init(args, cfg) -> int:
    data = Path(args.data)
    views = load_views(data)
    depths = sorted((data / "depth").glob("view_*.dpth"))
    if len(depths) != len(views):
        raise FormatError(f"{data}: {len(views)} views but {len(depths)} depth maps")
    triples = [(img, cam, load_depth(d)) for (img, cam), d in zip(views, depths)]
    scene = initialize_from_depth(triples, cfgmod.feature_spec(cfg), args.stride)
    save_scene(args.out, scene)
    print(f"initialized {len(scene)} Gaussians -> {args.out}")
    return 0


def cmd_refine(args, cfg) -> int:
    if args.mode:
        cfg["mode"] = args.mode
    if args.steps is not None:
        cfg["steps"] = str(args.steps)
    if args.enhancer:
        cfg["enhancer"] = args.enhancer
    rcfg = cfgmod.refine_config(cfg, args.threads)
    rcfg.record_trajectory = bool(args.dump_steps)
    scene0 = load_scene(args.scene)
    views = load_views(args.data)
    params = _load_head(args.head, rcfg, args.seed or 0)
    scene, trace = refine(scene0, views, params, rcfg)
    save_scene(args.out, scene)
    if args.trace:
        _write_json(args.trace, trace.to_dict())
    if args.dump_steps:
        dump = Path(args.dump_steps)
        dump.mkdir(parents=True, exist_ok=True)
        for t, snap in enumerate(trace.snapshots):
            for m, (_, cam) in enumerate(views):
                save_png(dump / f"step{t}_view{m:03d}.png",
                         render(snap, cam, rcfg.render).image)
    print(" ".join(f"t{r.step}={r.mean_psnr:.3f}dB" for r in trace.steps))
    return 0


def cmd_train(args, cfg) -> int:
    if args.iterations is not None:
        cfg["iterations"] = str(args.iterations)
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    tcfg = cfgmod.train_config(cfg)
    init = HeadParams.load(args.init) if args.init else None

    def progress(it, loss):
        if (it + 1) % 100 == 0:
            logger.info("iteration %d loss %.6g", it + 1, loss)

    try:
        params, log = train_head(tcfg, init, progress=progress)
    except TrainingError as exc:
        if exc.last_good is not None:
            exc.last_good.save(args.out)
        raise
    params.save(args.out)
    if args.log:
        _write_json(args.log, log.to_dict())
    print(f"trained {tcfg.iterations} iterations -> {args.out}")
    return 0


def cmd_baseline(args, cfg) -> int:
    steps = args.steps if args.steps is not None else int(cfg.get("baseline_steps", 500))
    lr = args.lr if args.lr is not None else float(cfg.get("baseline_lr", 5.0))
    line_search = args.line_search or cfgmod._get(cfg, "line_search", cfgmod._bool, False)
    scene0 = load_scene(args.scene)
    views = load_views(args.data)
    res = gradient_descent_baseline(scene0, views, steps, lr, line_search,
                                    cfgmod.render_options(cfg, args.threads))
    save_scene(args.out, res.scene)
    if args.curve:
        with atomic_write(args.curve, "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, loss in enumerate(res.losses):
                w.writerow([i, repr(loss)])
    print(f"loss {res.losses[0]:.6g} -> {res.losses[-1]:.6g} in {len(res.losses) - 1} steps"
          + (" (diverged)" if res.diverged else ""))
    return EXIT_NUMERIC if res.diverged else 0


def cmd_eval(args, cfg) -> int:
    scene = load_scene(args.scene)
    views = load_views(args.data)
    ids = [p.stem for p in _image_paths(Path(args.data))]
    report = evaluate(scene, views, cfgmod.render_options(cfg, args.threads), ids)
    if args.out:
        _write_json(args.out, report.to_dict())
    if args.table:
        with atomic_write(args.table, "w") as fh:
            fh.write(report.to_table() + "\n")
    print(report.to_table())
    return 0


def bench(scene, views, params, rcfg, steps_list: Sequence[int], repeats: int):
    """Rows of ``(T, mean seconds, peak traced bytes)`` for each step count."""
    rows = []
    for steps in steps_list:
        rcfg.steps = steps
        refine(scene, views, params, rcfg)      # warm-up, untimed
        times = []
        gc.collect()
        gc.disable()                            # as timeit does
        try:
            for _ in range(repeats):
                start = time.perf_counter()
                refine(scene, views, params, rcfg)
                times.append(time.perf_counter() - start)
        finally:
            gc.enable()
        tracemalloc.start()
        refine(scene, views, params, rcfg)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows.append((steps, float(np.mean(times)), int(peak)))
    return rows


def plot_bench(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    ts = [r[0] for r in rows]
    secs = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    ax.plot(ts, secs, "o-")
    ax.set_xlabel("refinement steps T")
    ax.set_ylabel("seconds")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    with atomic_write(path) as fh:
        fig.savefig(fh, format="png", metadata={"Software": None})
    plt.close(fig)


def cmd_bench(args, cfg) -> int:
    rcfg = cfgmod.refine_config(cfg, args.threads)
    steps_list = cfgmod._get(cfg, "bench_steps", cfgmod._ints, (1, 2, 3, 4, 5, 6))
    if args.steps_list:
        steps_list = cfgmod._ints(args.steps_list)
    repeats = args.repeats if args.repeats is not None else int(cfg.get("repeats", 5))
    scene = load_scene(args.scene)
    views = load_views(args.data)
    params = _load_head(args.head, rcfg, args.seed or 0)
    rows = bench(scene, views, params, rcfg, steps_list, repeats)
    with atomic_write(args.out, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "mean_seconds", "peak_bytes"])
        for r in rows:
            w.writerow([r[0], f"{r[1]:.6f}", r[2]])
    if args.plot:
        plot_bench(rows, args.plot)
    for r in rows:
        print(f"T={r[0]}  {r[1]:.4f}s  peak {r[2] / 1024:.0f} KiB")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gifsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", parents=[common], help="unproject depth maps to Gaussians")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=2)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("refine", parents=[common], help="forward-only refinement")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--head")
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.add_argument("--mode", choices=["ifsplat", "gifsplat"])
    s.add_argument("--steps", type=int)
    s.add_argument("--enhancer", help="identity | unsharp | external:<command>")
    s.add_argument("--dump-steps", metavar="DIR")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("train", parents=[common], help="train the update head")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--iterations", type=int)
    s.add_argument("--init", help="start from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("baseline", parents=[common], help="per-scene gradient descent")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--curve")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--line-search", action="store_true")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="runtime versus step count")
    s.add_argument("--scene", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--head")
    s.add_argument("--out", required=True)
    s.add_argument("--plot")
    s.add_argument("--repeats", type=int)
    s.add_argument("--steps-list", help="comma separated step counts")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"gifsplat: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.set)
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args, cfg)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"gifsplat: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EnhancerError as exc:
        print(f"gifsplat: enhancer failure: {exc}", file=sys.stderr)
        return EXIT_ENHANCER
    except (OSError, FormatError) as exc:
        print(f"gifsplat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RefineError, TrainingError, GeometryError, HeadError, FloatingPointError) as exc:
        print(f"gifsplat: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"gifsplat: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
