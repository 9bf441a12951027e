"""Time the compiled and numpy kernel backends on registration-sized inputs.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 5]

Also checks that both backends agree before timing them.
"""

import argparse
import timeit

import numpy as np

from shgreg import kernels


def cases(size, rng):
    img = rng.random((size, size, 1))
    feat = rng.random((size, size, 8))
    # a small rotation about the centre, as in a late registration pass
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s, mid = np.cos(0.07), np.sin(0.07), (size - 1) / 2
    sx = c * (xs - mid) - s * (ys - mid) + mid + 0.3
    sy = s * (xs - mid) + c * (ys - mid) + mid - 0.2
    small = size // 4
    f = rng.random((small, small, 8))
    m = rng.random((small, small, 8))
    return {
        "warp_bilinear scalar": lambda b: b.warp_bilinear(img, sx, sy),
        "warp_bilinear 8ch": lambda b: b.warp_bilinear(feat, sx, sy),
        "warp_bilinear +grad": lambda b: b.warp_bilinear(feat, sx, sy, with_grad=True),
        f"cost_volume {small}px r4 p2": lambda b: b.cost_volume(f, m, 4, 2),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "cython" not in kernels.BACKENDS:
        print("compiled backend not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name in kernels.BACKENDS) + f"{'speedup':>10}")
    for label, fn in cases(args.size, rng).items():
        outs = {name: fn(b) for name, b in kernels.BACKENDS.items()}
        ref = outs["python"]
        for name, out in outs.items():
            pairs = zip(ref, out) if isinstance(ref, tuple) else [(ref, out)]
            for a, b in pairs:
                np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12, err_msg=f"{label} {name}")
        times = {name: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
                 for name, b in kernels.BACKENDS.items()}
        line = f"{label:<28}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times.values())
        if "cython" in times:
            line += f"{times['python'] / times['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
