"""Time the numba kernels against the numpy/scipy fallback.

    python benchmarks/bench_kernels.py --size 32 128 --repeat 5

Each kernel is run once per backend before timing so JIT compilation is
excluded. Reports the best of ``--repeat`` runs and the speedup.
"""

import argparse
import timeit

import numpy as np

from promptseg import kernels


def cases(size, rng):
    mask = rng.random((size, size)) > 0.55
    hist = rng.integers(0, 500, size=256).astype(np.float64)
    boundary = rng.random((size, size)) > 0.97
    src = np.argwhere(rng.random((size, size)) > 0.97)
    x = rng.standard_normal((2, 8, size // 2, size // 2))
    w = rng.standard_normal((8, 8, 3, 3))
    b = np.zeros(8)
    dy = rng.standard_normal((2, 8, size // 2, size // 2))
    return {
        "label8": lambda: kernels.label8(mask),
        "otsu_bin": lambda: kernels.otsu_bin(hist),
        "within_tolerance": lambda: kernels.within_tolerance(src, boundary, 2),
        "conv2d_forward": lambda: kernels.conv2d_forward(x, w, b),
        "conv2d_backward": lambda: kernels.conv2d_backward(x, w, dy),
    }


def run(size, repeat, seed=0):
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(seed)
    fns = cases(size, rng)
    results = {}
    for flag in (False, True):
        kernels.use_numba(flag)
        for name, fn in fns.items():
            fn()  # warm-up / compile
            best = min(timeit.repeat(fn, number=1, repeat=repeat))
            results.setdefault(name, {})[kernels.backend()] = best
    kernels.use_numba(True)
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, nargs="+", default=[32, 128])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'size':>5}  {'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for size in args.size:
        for name, r in run(size, args.repeat).items():
            print(f"{size:>5}  {name:<18}{1e3 * r['numpy']:>12.3f}{1e3 * r['numba']:>12.3f}"
                  f"{r['numpy'] / r['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
