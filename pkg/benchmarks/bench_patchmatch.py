"""Compare the compiled and numpy backends of the patch search and fusion.

Run with ``python3 benchmarks/bench_patchmatch.py [--sizes 128 256 512]``.
"""
import argparse
import time

import numpy as np

from msls import patchmatch
from msls.pyramid import lowpass_downsample


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[128, 256, 512])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if patchmatch.BACKEND != "cython":
        print("compiled backend not available; only the numpy backend can run")
    rng = np.random.default_rng(0)
    print(f"{'size':>6} {'numpy s':>10} {'cython s':>10} {'speedup':>8} {'max diff':>10}")
    for n in args.sizes:
        x_l = rng.random((n, n))
        x_pr = lowpass_downsample(x_l, 3 ** 0.5)
        ref = patchmatch.reconstruct_sharp(x_l, x_pr, backend="numpy")
        t_np = best_of(lambda: patchmatch.reconstruct_sharp(x_l, x_pr, backend="numpy"),
                       args.repeat)
        if patchmatch.BACKEND == "cython":
            out = patchmatch.reconstruct_sharp(x_l, x_pr, backend="cython")
            t_cy = best_of(lambda: patchmatch.reconstruct_sharp(x_l, x_pr,
                                                                backend="cython"),
                           args.repeat)
            diff = float(np.abs(out - ref).max())
            print(f"{n:>6} {t_np:>10.3f} {t_cy:>10.3f} {t_np / t_cy:>7.1f}x {diff:>10.1e}")
        else:
            print(f"{n:>6} {t_np:>10.3f} {'-':>10} {'-':>8} {'-':>10}")


if __name__ == "__main__":
    main()
