"""Select the compiled kernels when built, else the numpy fallback.

Set ``GRIDPP_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("GRIDPP_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        pass


def _prep(a, kernel):
    return (np.ascontiguousarray(a, dtype=np.float64),
            np.ascontiguousarray(kernel, dtype=np.float64))


def convolve_lon_periodic(a, kernel, impl=None):
    return (impl or _impl).convolve_lon_periodic(*_prep(a, kernel))


def convolve_lat_edge(a, kernel, impl=None):
    return (impl or _impl).convolve_lat_edge(*_prep(a, kernel))


def convolve_lat_edge_adjoint(a, kernel, impl=None):
    return (impl or _impl).convolve_lat_edge_adjoint(*_prep(a, kernel))


def ols3_fit(y, x1, x2, ridge=1e-8, singular_tol=1e-12, impl=None):
    arrs = [np.ascontiguousarray(v, dtype=np.float64) for v in (y, x1, x2)]
    return (impl or _impl).ols3_fit(*arrs, float(ridge), float(singular_tol))
