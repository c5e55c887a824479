"""Time the compiled im2col/col2im kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes are the ones a tiny-profile and a full-profile training step hit.
"""
import argparse
import timeit

import numpy as np

from transmem import _pykernels

try:
    from transmem import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    # (batch, channels, H, W, k)
    (8, 16, 4, 4, 3),
    (8, 32, 4, 4, 3),
    (8, 64, 8, 8, 5),
    (50, 16, 4, 4, 3),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; only the fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'shape (B,C,H,W,k)':<22} {'op':<7} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for b, c, h, w, k in CASES:
        x = rng.normal(size=(b, c, h, w))
        cols = _pykernels.im2col(x, k)
        g = rng.normal(size=cols.shape)
        ops = {
            "im2col": (lambda: _pykernels.im2col(x, k), _ckernels and (lambda: _ckernels.im2col(x, k))),
            "col2im": (lambda: _pykernels.col2im(g, x.shape, k),
                       _ckernels and (lambda: _ckernels.col2im(g, x.shape, k))),
        }
        for op, (py, cy) in ops.items():
            t_py = bench(py, args.repeat)
            if cy:
                t_cy = bench(cy, args.repeat)
                print(f"{str((b, c, h, w, k)):<22} {op:<7} {t_py:>10.1f} {t_cy:>10.1f} {t_py / t_cy:>7.2f}x")
            else:
                print(f"{str((b, c, h, w, k)):<22} {op:<7} {t_py:>10.1f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
