"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--n 1000]

Prints the best-of-``repeat`` wall time per kernel and backend, the speedup,
and whether the two backends agree on the benchmark input.
"""

import argparse
import time

import numpy as np

from evadelab import _pykernels

try:
    from evadelab import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n):
    rng = np.random.default_rng(0)
    imgs = rng.random((n, 28, 28, 1))
    small = imgs[: max(1, n // 10)]
    alpha, beta = rng.normal(size=784), rng.normal(size=784)
    domain = (rng.random(784) > 0.2).astype(np.uint8)
    return [
        (f"median 3x3 on {n} images", lambda m: m.median_filter(imgs, 3, 3)),
        (f"median 2x2 on {n} images", lambda m: m.median_filter(imgs, 2, 2)),
        (f"nl-means 11-3-4 on {len(small)} images", lambda m: m.nl_means(small, 11, 3, 4.0)),
        ("saliency pair search, 784 features", lambda m: m.saliency_pair(alpha, beta, domain, True)),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--n", type=int, default=1000)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'kernel':40s} {'numpy s':>10s} {'cython s':>10s} {'speedup':>8s} {'agree':>6s}")
    for name, run in cases(args.n):
        t_py, out_py = best_time(lambda: run(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:40s} {t_py:10.4f} {'-':>10s} {'-':>8s} {'-':>6s}")
            continue
        t_c, out_c = best_time(lambda: run(_ckernels), args.repeat)
        if isinstance(out_py, tuple):
            agree = tuple(out_py) == tuple(out_c)
        else:
            agree = bool(np.allclose(out_py, out_c, rtol=0, atol=1e-12))
        print(f"{name:40s} {t_py:10.4f} {t_c:10.4f} {t_py / t_c:7.1f}x {str(agree):>6s}")


if __name__ == "__main__":
    main()
