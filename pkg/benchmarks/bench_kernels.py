"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

The numba column is blank when numba is not installed. Compilation happens in
a warm-up call and is not timed.
"""
import argparse
import timeit

import numpy as np

from metasel import _accel, kernels


def cases(rng):
    F = rng.standard_normal((20000, 256))
    C = rng.standard_normal((20, 256))
    a = rng.integers(0, 20, size=len(F))
    delta = rng.standard_normal((512, 64))
    act = rng.standard_normal((512, 196))
    gw = rng.standard_normal((64, 196))
    gb = rng.standard_normal(64)
    w = rng.random(512)
    return {
        "assign_weighted": ((F, C), kernels.assign_weighted_np, kernels.assign_weighted_nb),
        "centroid_sums": ((F, a, 20), kernels.centroid_sums_np, kernels.centroid_sums_nb),
        "sample_inner": ((delta, act, gw, gb), kernels.sample_inner_np, kernels.sample_inner_nb),
        "weighted_outer": ((delta, act, w), kernels.weighted_outer_np, kernels.weighted_outer_nb),
    }


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (inputs, f_np, f_nb) in cases(rng).items():
        t_np = best_of(f_np, inputs, args.repeat) * 1e3
        if _accel.HAVE_NUMBA:
            f_nb(*inputs)
            t_nb = best_of(f_nb, inputs, args.repeat) * 1e3
            print(f"{name:<16} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")
        else:
            print(f"{name:<16} {t_np:10.2f} {'':>10} {'':>8}")


if __name__ == "__main__":
    main()
