"""Time the compiled geometry kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--points 8192] [--repeat 5]

Prints one row per kernel with the best wall time of each backend and the
speedup, after checking that both backends return identical results.
"""
import argparse
import timeit

import numpy as np

from pointgpt_nn import kernels


def cases(n_points: int, rng: np.random.Generator) -> dict:
    pts = np.ascontiguousarray(rng.uniform(-1, 1, (n_points, 3)))
    centers = np.ascontiguousarray(pts[:512])
    P = np.ascontiguousarray(rng.uniform(-1, 1, (32, 64, 3)))
    Q = np.ascontiguousarray(rng.uniform(-1, 1, (32, 32, 3)))
    q = np.ascontiguousarray(rng.integers(0, 2 ** 21, (n_points, 3), dtype=np.uint64))
    return {
        "fps": lambda k: k.fps(pts, 512, 0),
        "knn": lambda k: k.knn(pts, centers, 32),
        "nearest_sq": lambda k: k.nearest_sq(P, Q),
        "morton_interleave": lambda k: k.morton_interleave(q),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=8192)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if not kernels.HAVE_COMPILED:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")

    print(f"{'kernel':<18}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(args.points, np.random.default_rng(0)).items():
        if not same(fn(py), fn(cy)):
            raise SystemExit(f"{name}: backends disagree")
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
        print(f"{name:<18}{t_py * 1e3:>12.2f}{t_cy * 1e3:>12.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
