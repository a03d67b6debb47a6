"""Compare the numba and pure-numpy kernels.

    python benchmarks/bench_kernels.py [--repeat 20] [--frames 48]

Prints one line per kernel with the best-of-N time of each path and the
maximum absolute difference between their outputs. The first jitted call
(compilation or cache load) is excluded from timing.
"""

import argparse
import time

import numpy as np

from metaface import kernels
from metaface._accel import HAS_NUMBA


def best_of(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--frames", type=int, default=48)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    T = args.frames
    x = rng.standard_normal((T * 20, 16))
    pred = rng.standard_normal((T, 16, 3))
    gt = rng.standard_normal((T + 5, 16, 3))
    cost = kernels.lip_cost_matrix_numpy(pred, gt)

    cases = [
        ("lowpass", kernels.lowpass_numpy, kernels.lowpass_jit, (x, 0.7)),
        ("lip_cost_matrix", kernels.lip_cost_matrix_numpy, kernels.lip_cost_matrix_jit, (pred, gt)),
        ("dtw_accumulate", kernels.dtw_accumulate_numpy, kernels.dtw_accumulate_jit, (cost,)),
    ]
    print(f"numba available: {HAS_NUMBA}  active path: {'numba' if kernels.NUMBA_ENABLED else 'numpy'}")
    print(f"{'kernel':<18}{'numpy_ms':>12}{'numba_ms':>12}{'speedup':>10}{'max_abs_diff':>15}")
    for name, f_np, f_jit, fargs in cases:
        t_np, out_np = best_of(f_np, fargs, args.repeat)
        t_jit, out_jit = best_of(f_jit, fargs, args.repeat)
        diff = float(np.max(np.abs(np.asarray(out_np, dtype=float) - np.asarray(out_jit, dtype=float))))
        print(f"{name:<18}{t_np * 1e3:>12.4f}{t_jit * 1e3:>12.4f}{t_np / t_jit:>10.1f}{diff:>15.3g}")


if __name__ == "__main__":
    main()
