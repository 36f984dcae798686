"""Time the numba and numpy kernel backends on the same inputs.

Usage::

    python3 benchmarks/bench_kernels.py [--size 96] [--repeats 5]

Both backend modules are imported directly, so the ``TSFM_NUMBA`` flag does
not matter here. Numba timings exclude the first (compiling) call. Each row
also reports the largest difference between the two outputs.
"""

import argparse
import time

import numpy as np

from tsfm.kernels import _numba, _numpy


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(size, rng):
    vol = rng.standard_normal((size, size, size)).astype(np.float32)
    labels = rng.integers(0, 5, (size, size, size)).astype(np.uint16)
    lut = np.array([0, 2, 1, 3, 0], dtype=np.uint16)
    pred, gt = rng.random((size,) * 3) < 0.3, rng.random((size,) * 3) < 0.3
    up = (size * 3 // 2,) * 3
    patch = (size // 2,) * 3
    tile = rng.random((3, *patch)).astype(np.float32)
    weight = rng.random(patch).astype(np.float32)

    def tiles(mod):
        acc = np.zeros((3, size, size, size), np.float32)
        wsum = np.zeros((size, size, size), np.float32)
        step = size // 4
        for z in range(0, size - patch[0] + 1, step):
            for y in range(0, size - patch[1] + 1, step):
                for x in range(0, size - patch[2] + 1, step):
                    mod.accumulate_tile(acc, wsum, tile, weight, (z, y, x))
        return acc

    return {
        "resample_linear": lambda m: m.resample_linear(vol, up),
        "resample_nearest": lambda m: m.resample_nearest(labels, up),
        "remap_lut": lambda m: m.remap_lut(labels, lut),
        "overlap_counts": lambda m: np.array(m.overlap_counts(pred, gt)),
        "accumulate_tile": tiles,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=96, help="edge length of the cubic test volume")
    parser.add_argument("--repeats", type=int, default=5, help="timed runs per kernel; the best is reported")
    parser.add_argument("--seed", type=int, default=0, help="seed for the random inputs")
    args = parser.parse_args(argv)

    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, fn in cases(args.size, np.random.default_rng(args.seed)).items():
        fn(_numba)  # compile
        t_np, out_np = best_of(lambda: fn(_numpy), args.repeats)
        t_nb, out_nb = best_of(lambda: fn(_numba), args.repeats)
        diff = float(np.max(np.abs(np.asarray(out_np, np.float64) - np.asarray(out_nb, np.float64))))
        print(f"{name:<18} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
