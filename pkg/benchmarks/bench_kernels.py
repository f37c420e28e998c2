"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on desk-scale inputs (a 181x360 raster with 17 features,
and per-gridpoint least squares over 40 history steps).  Outputs of the two
backends are compared before timing.
"""
import argparse
import timeit

import numpy as np

from gridpp import _kernels, _pykernels
from gridpp.grid import gaussian_kernel

try:
    from gridpp import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    field = rng.standard_normal((17, 181, 360))
    k2 = gaussian_kernel(2.0)
    box9 = np.full(9, 1 / 9)
    n_hist, n_pts = 40, 181 * 360
    y, x1, x2 = rng.standard_normal((3, n_hist, n_pts))

    def per_raster(op, kernel):
        return lambda impl: np.stack([op(f, kernel, impl) for f in field])

    return [
        ("lon periodic, gaussian sigma 2", per_raster(_kernels.convolve_lon_periodic, k2)),
        ("lat edge, gaussian sigma 2", per_raster(_kernels.convolve_lat_edge, k2)),
        ("lat edge adjoint, box 9", per_raster(_kernels.convolve_lat_edge_adjoint, box9)),
        ("ols3 fit, 40 steps x 65160 pts", lambda impl: _kernels.ols3_fit(y, x1, x2, impl=impl)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  max |diff|")
    for name, fn in cases(rng):
        a, b = fn(_pykernels), fn(_ckernels)
        a, b = (a[:-1] if isinstance(a, tuple) else (a,)), (b[:-1] if isinstance(b, tuple) else (b,))
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
