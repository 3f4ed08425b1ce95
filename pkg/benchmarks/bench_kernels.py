"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from deqmpi import _pykernels

try:
    from deqmpi import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((16, 8, 13, 26))
    w = rng.standard_normal((8, 8, 3, 3))
    b = rng.standard_normal(8)
    g = rng.standard_normal((16, 8, 13, 26))
    A = rng.standard_normal((954, 338))
    y = rng.standard_normal(954)
    img = rng.random((13, 26))
    return {
        "conv2d_forward": lambda k: k.conv2d_forward(x, w, b),
        "conv2d_backward_input": lambda k: k.conv2d_backward_input(g, w),
        "conv2d_backward_weight": lambda k: k.conv2d_backward_weight(x, g, 3, 3),
        "kaczmarz_10_sweeps": lambda k: k.kaczmarz_sweeps(A, y, np.zeros(338), np.zeros(954), 0.1, 10, True),
        "tv_prox_20_iters": lambda k: k.tv_prox(img, 0.02, 20, 0.249, None),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    kernels = [("python", _pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    print(f"{'kernel':24s}" + "".join(f"{n:>12s}" for n, _ in kernels) + "     speedup")
    for name, fn in cases(rng).items():
        times = []
        for _, mod in kernels:
            fn(mod)  # warm up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{name:24s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
