"""Time every kernel under the numba and the numpy implementation.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 256]

Both tables are imported from the same process, so the environment flag does
not matter here. Numba compile time is excluded by a warm-up call. The end of
the run also times one synthetic episode through the full pipeline under
each path (in subprocesses, since the active path is fixed at import).
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from demoseg.kernels import NUMBA, NUMPY


def _inputs(size, rng):
    h, w = size * 3 // 4, size
    grid = rng.random((h, w)) < 0.35
    a = NUMPY["rle_encode"](grid.ravel())
    b = NUMPY["rle_encode"]((rng.random((h, w)) < 0.02).ravel())
    blob = np.zeros((h, w), bool)
    blob[10:40, 10:60] = True
    far = np.zeros((h, w), bool)
    far[h - 30:h - 5, w - 50:w - 8] = True
    ra, rb = NUMPY["rle_encode"](blob.ravel()), NUMPY["rle_encode"](far.ravel())
    pts = np.concatenate([rng.normal(c, 1.0, (150, 4)) for c in (0.0, 8.0, 20.0)])
    cloud = rng.random((3000, 3))
    return {
        "rle_encode": (grid.ravel(),),
        "rle_decode": (a, h * w),
        "runs_intersection": (a, b),
        "runs_min_sqdist": (ra, rb, w),
        "label_components": (grid,),
        "dbscan_labels": (pts, 1.5, 3),
        "knn_mean_distance": (cloud, 8),
        "row_segments": (a, w),
    }


def _time(fn, args, repeat):
    fn(*args)  # warm-up (numba compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


_EPISODE = """
import time
from demoseg.config import Config
from demoseg.pipeline import run_episode
from demoseg.synth import RuleClient, generate, mock_rules, random_script
sc = random_script(3, 10)
ep, _ = generate(sc)
cfg = Config({"client": {"mock": True}})
run_episode(ep, cfg, RuleClient(mock_rules(sc)))
t = time.perf_counter()
run_episode(ep, cfg, RuleClient(mock_rules(sc)))
print(time.perf_counter() - t)
"""


def _episode_time(disable):
    env = dict(os.environ, DEMOSEG_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", _EPISODE], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--skip-episode", action="store_true")
    args = ap.parse_args()
    inputs = _inputs(args.size, np.random.default_rng(0))
    print(f"{'kernel':<20}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, a in inputs.items():
        tn = _time(NUMBA[name], a, args.repeat)
        tp = _time(NUMPY[name], a, args.repeat)
        print(f"{name:<20}{tn * 1e3:>12.3f}{tp * 1e3:>12.3f}{tp / tn:>9.1f}x")
    if not args.skip_episode:
        tn, tp = _episode_time(False), _episode_time(True)
        print(f"{'episode (10 tasks)':<20}{tn * 1e3:>12.1f}{tp * 1e3:>12.1f}{tp / tn:>9.1f}x")


if __name__ == "__main__":
    main()
