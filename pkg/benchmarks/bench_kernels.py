"""Time each compiled kernel against its numpy twin.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 128]

The first numba call (JIT compile or cache load) is excluded. Results are
checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from spmae import _accel, kernels


def cases(size, rng):
    maps = rng.uniform(-0.6, 0.6, (4, 2, 3))
    choices = rng.integers(0, 4, (256, 400))
    starts = rng.uniform(-1, 1, (256, 2))
    yield "chaos_game", kernels._chaos_game_nb, kernels._chaos_game_np, (maps, choices, starts, 20)

    n = 2000
    theta = rng.uniform(0, np.pi, n)
    stamp = (rng.integers(0, 3, n), rng.uniform(0, size, n), rng.uniform(0, size, n),
             rng.uniform(1, size / 8, n), rng.uniform(0.2, 1, n), np.cos(theta), np.sin(theta),
             rng.uniform(0, 1, (n, 3)), size * size, 0)

    def fresh(fn):
        def run():
            canvas = np.zeros((3, size, size))
            painted = np.zeros((size, size), dtype=bool)
            return fn(canvas, painted, *stamp), canvas
        return run

    yield "stamp_shapes", fresh(kernels._stamp_nb), fresh(kernels._stamp_np), ()

    px, py = rng.uniform(0, size, 3000), rng.uniform(0, size, 3000)
    yield "point_distance", kernels._point_distance_nb, kernels._point_distance_np, (px, py, size, size, 3.0)

    mag = rng.random((size, size))
    sector = rng.integers(0, 4, (size, size))
    yield "nms", kernels._nms_nb, kernels._nms_np, (mag, sector, kernels._NMS_OFFSETS)

    weak = rng.random((size, size)) < 0.55
    strong = weak & (rng.random((size, size)) < 0.01)
    yield "hysteresis", kernels._hysteresis_nb, kernels._hysteresis_np, (strong, weak)

    frames = rng.standard_normal((100, 512)).astype(np.complex128)
    rev, tw = kernels._bit_reverse_indices(512), kernels._twiddles(512)
    yield "fft_512x100", kernels._fft_nb, kernels._fft_np, (frames, rev, tw)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.allclose(a, b, rtol=0, atol=1e-9)
    return a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"numba available: {_accel.HAVE_NUMBA}")
    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, nb, np_fn, call_args in cases(args.size, np.random.default_rng(args.seed)):
        ref = nb(*call_args)  # compile / load cache outside the timing
        if not same(ref, np_fn(*call_args)):
            raise SystemExit(f"{name}: backends disagree")
        t_nb = min(timeit.repeat(lambda: nb(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_nb:>12.2f}{t_np:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
