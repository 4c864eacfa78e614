"""Compare the numba and numpy paths of the hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import math
import time

import numpy as np

from collabinfer import _kernels


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    cases = []
    for m, n, p in [(1, 3072, 256), (64, 3072, 256), (200, 3072, 256)]:
        a = rng.integers(0, 2**64, size=(m, n), dtype=np.uint64)
        b = rng.integers(0, 2**64, size=(n, p), dtype=np.uint64)
        cases.append((f"ring_matmul {m}x{n}@{n}x{p}",
                      lambda a=a, b=b: _kernels.ring_matmul_numpy(a, b),
                      (lambda a=a, b=b: _kernels.ring_matmul_numba(a, b)) if _kernels.HAVE_NUMBA else None,
                      lambda a=a, b=b: np.array_equal(_kernels.ring_matmul_numpy(a, b),
                                                      _kernels.ring_matmul_numba(a, b))))
    for h, w, c in [(8, 8, 1), (32, 32, 3)]:
        img = rng.uniform(size=(h, w, c))
        ang = math.radians(7.5)
        cases.append((f"bilinear_rotate {h}x{w}x{c}",
                      lambda img=img: _kernels.bilinear_rotate_numpy(img, ang),
                      (lambda img=img: _kernels.bilinear_rotate_numba(img, ang)) if _kernels.HAVE_NUMBA else None,
                      lambda img=img: np.allclose(_kernels.bilinear_rotate_numpy(img, ang),
                                                  _kernels.bilinear_rotate_numba(img, ang))))

    print(f"{'kernel':34s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} agree")
    for name, np_fn, nb_fn, check in cases:
        t_np = _best(np_fn, args.repeat)
        if nb_fn is None:
            print(f"{name:34s} {t_np:10.4f} {'n/a':>10s}")
            continue
        nb_fn()  # compile
        t_nb = _best(nb_fn, args.repeat)
        print(f"{name:34s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.2f} {check()}")


if __name__ == "__main__":
    main()
