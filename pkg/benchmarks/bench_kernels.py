"""Time the numpy and numba implementations of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both implementations are always importable from ``dualguide.kernels.KERNELS``;
the ``DUALGUIDE_NUMBA`` flag only picks which one the library uses. Numba
compile time is excluded by a warm-up call and reported separately.
"""

import argparse
import time

import numpy as np

from dualguide._accel import NUMBA_INSTALLED
from dualguide.backends import NoiseSchedule
from dualguide.kernels import KERNELS


def cases(rng):
    vecs = rng.normal(size=(2000, 512))
    labels = rng.integers(0, 100, 2000)
    labels[:100] = np.arange(100)
    cdf = np.cumsum(rng.dirichlet(np.ones(100)))
    cdf[-1] = 1.0
    path = NoiseSchedule.linear(1000, 50).alpha_path()
    x = rng.normal(size=(10_000, 16))
    means = rng.normal(size=(4, 16))
    return {
        "class_cosine_means (2000x512, 100 classes)": ("class_cosine_means", (vecs, labels, 100)),
        "categorical_draws (1e6 draws, 100 bins)": ("categorical_draws", (cdf, rng.random(1_000_000))),
        "guided_ddim_gaussian (1e4 x 16, 50 steps)": (
            "guided_ddim_gaussian",
            (x, path, means, np.array([1.0, 0.8, 0.8, 0.8]), np.array([7.5, 1.0, 1.0]), 4),
        ),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if not NUMBA_INSTALLED:
        print("numba is not installed; only the numpy path is timed")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':45s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s} {'compile':>9s}")
    for label, (name, kargs) in cases(rng).items():
        t_np = best_of(KERNELS["numpy"][name], kargs, args.repeat)
        if NUMBA_INSTALLED:
            t0 = time.perf_counter()
            KERNELS["numba"][name](*kargs)
            compile_s = time.perf_counter() - t0
            t_nb = best_of(KERNELS["numba"][name], kargs, args.repeat)
            print(f"{label:45s} {t_np * 1e3:8.2f}ms {t_nb * 1e3:8.2f}ms {t_np / t_nb:7.1f}x {compile_s:8.2f}s")
        else:
            print(f"{label:45s} {t_np * 1e3:8.2f}ms {'-':>10s}")


if __name__ == "__main__":
    main()
