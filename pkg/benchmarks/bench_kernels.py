"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row reports the best-of-N wall time per backend and the speedup. The
outputs of both backends are also compared for bitwise equality.
"""

import argparse
import timeit

import numpy as np

from detailnet import kernels


def cases(rng):
    x = rng.standard_normal((3, 64, 64, 64)).astype(np.float32)
    oh = ow = 64
    cols = kernels.im2col(x, 3, 3, 1, 2, 2, 2, oh, ow)
    pooled_in = rng.standard_normal((3, 32, 128, 128)).astype(np.float32)
    _, arg = kernels.maxpool_forward(pooled_in, 3, 2, 1, 64, 64)
    grad = rng.standard_normal((3, 32, 64, 64)).astype(np.float32)
    image = rng.random((120, 160, 3))
    radius = rng.uniform(0, 6, (120, 160))
    return {
        "im2col 3x64x64x64 k3 r2": lambda: kernels.im2col(x, 3, 3, 1, 2, 2, 2, oh, ow),
        "col2im 3x64x64x64 k3 r2": lambda: kernels.col2im(cols, 3, 64, 64, 64, 3, 3, 1, 2, 2, 2, oh, ow),
        "maxpool fwd 3x32x128x128": lambda: kernels.maxpool_forward(pooled_in, 3, 2, 1, 64, 64),
        "maxpool bwd 3x32x64x64": lambda: kernels.maxpool_backward(grad, arg, 128, 128),
        "disc_gather 120x160 r<=6": lambda: kernels.disc_gather(image, radius, 6),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "cython" not in kernels.available_backends():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    fns = cases(rng)
    print(f"{'kernel':<28} {'cython ms':>10} {'python ms':>10} {'speedup':>8}  same")
    for name, fn in fns.items():
        times, outs = {}, {}
        for backend in ("cython", "python"):
            prev = kernels.use_backend(backend)
            try:
                outs[backend] = fn()
                times[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
            finally:
                kernels.use_backend(prev)
        a, b = outs["cython"], outs["python"]
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        print(f"{name:<28} {times['cython']:>10.2f} {times['python']:>10.2f} "
              f"{times['python'] / times['cython']:>7.1f}x  {'yes' if same else 'NO'}")


if __name__ == "__main__":
    main()
