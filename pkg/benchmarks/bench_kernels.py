"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same inputs under every importable backend; the
table reports the best-of-N wall time and the speedup over numpy.
"""
import argparse
import timeit

import numpy as np

from rigidflow import kernels
from rigidflow.geometry import default_intrinsics
from rigidflow.synth import make_scene, render_pair


def _cases(rng):
    H, W = 480, 640
    fwd = rng.normal(0, 3, (H, W, 2))
    bwd = -fwd + rng.normal(0, 0.3, (H, W, 2))
    mask = rng.random((H, W)) < 0.02
    y = rng.normal(0, 1, (10000, 3))
    r = rng.normal(0, 0.05, (10000, 3))
    spec = make_scene(0, object_count_mean=15, object_count_sigma=5)
    intr = default_intrinsics()
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    dirs = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=float)], -1)
    dirs = np.ascontiguousarray(dirs.reshape(-1, 3))
    prims = np.ascontiguousarray(spec.primitives_at(0))
    origin = np.zeros(3)
    return {
        "fb_residual 640x480": lambda k: k.fb_residual(fwd, bwd),
        "dilate 640x480 p=10": lambda k: k.dilate(mask, 10),
        "huber_normal_equations 10k": lambda k: k.huber_normal_equations(y, r, 0.05),
        f"raycast 160x120 x{len(prims)} prims": lambda k: k.raycast(origin, dirs, prims),
        "render_pair (active backend)": None if kernels.BACKEND == "python" else (lambda k: render_pair(spec, (0, 5))),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backs = kernels.backends()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<34}" + "".join(f"{b + ' ms':>14}" for b in backs) + f"{'speedup':>10}")
    for name, fn in _cases(rng).items():
        if fn is None:
            continue
        times = {}
        for bname, mod in backs.items():
            if name.startswith("render_pair") and bname != kernels.BACKEND:
                continue
            n = 1
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=n, repeat=args.repeat)) / n * 1e3
        row = f"{name:<34}" + "".join(f"{times[b]:>14.3f}" if b in times else f"{'-':>14}" for b in backs)
        if "python" in times and "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
