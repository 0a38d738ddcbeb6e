"""Time the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 20] [--size 128x416]

Both backends are imported directly, so the result does not depend on
EGOFUSION_PURE_PYTHON. Outputs are compared before timing.
"""
import argparse
import timeit

import numpy as np

from egofusion.tensor import _pykernels

try:
    from egofusion.tensor import _ckernels
except ImportError:
    _ckernels = None


def _cases(H, W, rng):
    x = rng.standard_normal((2, 16, H, W)).astype(np.float32)
    cols = _pykernels.im2col(x, 3, 3, 1, 1)
    img = rng.standard_normal((2, 3, H, W)).astype(np.float32)
    L = H * W
    cx = (rng.uniform(-2, W + 1, (2, L))).astype(np.float32)
    cy = (rng.uniform(-2, H + 1, (2, L))).astype(np.float32)
    g = rng.standard_normal((2, 3, L)).astype(np.float32)
    return {
        "im2col 3x3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 3x3": lambda k: k.col2im(cols, 16, H, W, 3, 3, 1, 1),
        "bilinear fwd": lambda k: k.bilinear_forward(img, cx, cy),
        "bilinear bwd": lambda k: k.bilinear_backward(img, cx, cy, g),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    if a is None:
        return b is None
    return np.allclose(a, b, rtol=1e-4, atol=1e-4)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", default="128x416", help="HxW of the feature maps")
    args = ap.parse_args(argv)
    H, W = (int(v) for v in args.size.lower().split("x"))
    if _ckernels is None:
        print("compiled extension not built; reinstall with Cython available")
        return 1

    cases = _cases(H, W, np.random.default_rng(0))
    print(f"{'kernel':<14} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}  match")
    for name, fn in cases.items():
        ok = _same(fn(_pykernels), fn(_ckernels))
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:<14} {t_py * 1e3:10.2f} {t_c * 1e3:10.2f} {t_py / t_c:8.1f}x  {ok}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
