"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--points 40000] [--repeat 20]

Prints the best-of-N time per call for each backend and checks that both
produce identical outputs.
"""

import argparse
import timeit

import numpy as np

from tavp import _pykernels

try:
    from tavp import _ckernels
except ImportError:
    _ckernels = None


def make_inputs(n_points, size, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-10, size + 10, n_points)
    v = rng.uniform(-10, size + 10, n_points)
    depth = rng.uniform(-0.2, 2.0, n_points)
    image = rng.random((size, size))
    return u, v, depth, image


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=40000)
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--radius", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    u, v, depth, image = make_inputs(args.points, args.size)
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the numpy fallback only")

    results = {}
    for name, mod in backends.items():
        t_splat = bench(lambda: mod.splat_zbuffer(u, v, depth, args.size, args.size, args.radius), args.repeat)
        t_bil = bench(lambda: mod.bilinear_sample(image, u, v), args.repeat)
        results[name] = (t_splat, t_bil)
        print(f"{name:>7}  splat_zbuffer {t_splat * 1e3:8.3f} ms   bilinear_sample {t_bil * 1e3:8.3f} ms")

    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup  splat_zbuffer {py[0] / cy[0]:6.1f}x       bilinear_sample {py[1] / cy[1]:6.1f}x")
        zp, ip = _pykernels.splat_zbuffer(u, v, depth, args.size, args.size, args.radius)
        zc, ic = _ckernels.splat_zbuffer(u, v, depth, args.size, args.size, args.radius)
        same = np.array_equal(zp, zc) and np.array_equal(ip, ic)
        same &= np.array_equal(_pykernels.bilinear_sample(image, u, v), _ckernels.bilinear_sample(image, u, v))
        print("outputs identical:", same)


if __name__ == "__main__":
    main()
