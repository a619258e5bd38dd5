"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--threads 1]

Each kernel runs once untimed (JIT compile) and then ``--repeat`` times; the
best wall time is reported. The last section times one full generator
forward/backward at training size so the kernel gains can be read in context.
"""

import argparse
import time

import numpy as np

from haan import _kernels
from haan import tensor as T
from haan.networks import ArchConfig, DefogGenerator
from haan.tensor import Tensor


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x = rng.standard_normal((2, 32, 66, 66)).astype(np.float32)
    k, s, ho, wo = 3, 1, 64, 64
    cols = _kernels.im2col(x, k, s, ho, wo)
    pool_in = rng.standard_normal((2, 32, 64, 64)).astype(np.float32)
    _, idx = _kernels.maxpool(pool_in, 2, 2, 32, 32)
    g = rng.standard_normal((2, 32, 32, 32)).astype(np.float32)
    img = rng.random((256, 256))
    return {
        "im2col 2x32x66x66 k3": lambda: _kernels.im2col(x, k, s, ho, wo),
        "col2im 2x32x66x66 k3": lambda: _kernels.col2im(cols, 2, 32, 66, 66, k, s, ho, wo),
        "maxpool 2x32x64x64 k2": lambda: _kernels.maxpool(pool_in, 2, 2, 32, 32),
        "maxpool backward": lambda: _kernels.maxpool_backward(g, idx, 64, 64, 2, 2),
        "min filter 256x256 w15": lambda: _kernels.min_filter(img, 15),
    }


def generator_step(rng):
    net = DefogGenerator(ArchConfig(width_scale=4), rng)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 64, 64)).astype(np.float32))

    def run():
        net.zero_grad()
        out = net(x)
        T.backward(T.reduce(out * out, "mean"))

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    _kernels.set_threads(args.threads)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    cases["generator fwd+bwd 2x3x64x64"] = generator_step(rng)

    print(f"{'case':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    prev = _kernels.backend()
    try:
        for name, fn in cases.items():
            res = {}
            for backend in ("numpy", "numba"):
                _kernels.set_backend(backend)
                res[backend] = best_of(fn, args.repeat) * 1e3
            print(f"{name:32s} {res['numpy']:10.2f} {res['numba']:10.2f} {res['numpy'] / res['numba']:7.2f}x")
    finally:
        _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
