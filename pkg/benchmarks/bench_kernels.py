"""Compare the compiled and pure-Python rank-allocation kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from mgaa.allocate import _pack
from mgaa.decompose import energy_profile
from mgaa.kernels import available_backends


def workload(n_mats, dim, seed=0):
    rng = np.random.default_rng(seed)
    dims = {f"m{i}": (dim, dim) for i in range(n_mats)}
    profiles = {k: energy_profile(np.exp(-rng.uniform(0.01, 0.2) * np.arange(dim)) * rng.uniform(0.5, 1, dim))
                for k in dims}
    _, flat, offsets, floors, rmax, unit = _pack(profiles, dims, 0.1, None)
    budget = n_mats * dim // 4
    return flat, offsets, floors, rmax, unit, budget


CASES = [
    ("balanced 4 x 64", "balanced_solve", (4, 64)),
    ("balanced 3 x 172", "balanced_solve", (3, 172)),
    ("balanced 32 x 512", "balanced_solve", (32, 512)),
    ("brute force 3 x 8", "brute_force_solve", (3, 8)),
    ("brute force 4 x 24", "brute_force_solve", (4, 24)),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the Python kernels are available")
    names = sorted(backends)
    print(f"{'case':<22}" + "".join(f"{n + ' (ms)':>16}" for n in names) + f"{'speedup':>10}")
    for label, fn, (n, d) in CASES:
        data = workload(n, d)
        times = {}
        results = {}
        for name in names:
            f = getattr(backends[name], fn)
            results[name] = f(*data)
            number = 1 if name == "python" and fn == "brute_force_solve" else 3
            best = min(timeit.repeat(lambda: f(*data), number=number, repeat=args.repeat)) / number
            times[name] = best * 1e3
        if len(names) == 2:
            assert np.array_equal(results["cython"][0], results["python"][0]), label
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<22}" + "".join(f"{times[n]:>16.3f}" for n in names) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
