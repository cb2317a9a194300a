"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 32]

Each kernel runs once per backend before timing so JIT compilation is not
counted. Outputs of the two backends are compared before anything is timed.
"""
import argparse
import timeit

import numpy as np

from fedavoid import _accel, continual as cl, kernels, models, nn


def cases(batch, rng):
    x = rng.random((batch, 16, 16, 16), dtype=np.float32)
    cols = kernels.im2col(x, 3, 1, 1)
    pooled_in = rng.random((batch, 16, 16, 16), dtype=np.float32)
    _, arg = kernels.maxpool_forward(pooled_in, 2)
    dout = rng.random((batch, 16, 8, 8), dtype=np.float32)
    world = cl.random_world(0)
    angles = np.linspace(-np.pi, np.pi, 256, endpoint=False)
    arch = models.get_arch("alexnet_lite")
    params = arch.init_params(0)
    imgs = rng.random((batch, 3, 32, 32), dtype=np.float32)
    labels = rng.integers(0, 2, batch)
    return {
        "im2col 3x3": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, x.shape, 3, 1, 1),
        "maxpool fwd": lambda: kernels.maxpool_forward(pooled_in, 2),
        "maxpool bwd": lambda: kernels.maxpool_backward(dout, arg, pooled_in.shape, 2),
        "raycast 256": lambda: kernels.raycast_grid(world.occupancy, 4.05, 4.05, angles, world.cell_size, 10.0),
        "alexnet step": lambda: nn.loss_and_grads(arch.layers, params, imgs, labels),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, dict):
        return all(np.allclose(a[k], b[k], rtol=1e-4, atol=1e-5) for k in a)
    if isinstance(a, float):
        return abs(a - b) <= 1e-5 * max(1.0, abs(a))
    return np.allclose(a, b, rtol=1e-5, atol=1e-6)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    fns = cases(args.batch, np.random.default_rng(0))
    rows = []
    prev = _accel.backend()
    try:
        for name, fn in fns.items():
            results, times = {}, {}
            for b in ("numba", "numpy"):
                _accel.set_backend(b)
                results[b] = fn()
                number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
                times[b] = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            if not _same(results["numba"], results["numpy"]):
                raise SystemExit(f"{name}: backends disagree")
            rows.append((name, times["numba"], times["numpy"]))
    finally:
        _accel.set_backend(prev)
    print(f"{'kernel':<14} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, tn, tp in rows:
        print(f"{name:<14} {tn * 1e3:>10.3f} {tp * 1e3:>10.3f} {tp / tn:>7.1f}x")


if __name__ == "__main__":
    main()
