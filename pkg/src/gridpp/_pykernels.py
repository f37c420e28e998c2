"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def convolve_lon_periodic(a, kernel):
    n_lon = a.shape[1]
    r = len(kernel) // 2
    out = np.zeros_like(a, dtype=np.float64)
    cols = np.arange(n_lon)
    for m, k in enumerate(kernel):
        out += k * a[:, (cols + m - r) % n_lon]
    return out


def convolve_lat_edge(a, kernel):
    n_lat = a.shape[0]
    r = len(kernel) // 2
    out = np.zeros_like(a, dtype=np.float64)
    rows = np.arange(n_lat)
    for m, k in enumerate(kernel):
        out += k * a[np.clip(rows + m - r, 0, n_lat - 1), :]
    return out


def convolve_lat_edge_adjoint(a, kernel):
    n_lat = a.shape[0]
    r = len(kernel) // 2
    out = np.zeros_like(a, dtype=np.float64)
    rows = np.arange(n_lat)
    for m, k in enumerate(kernel):
        np.add.at(out, np.clip(rows + m - r, 0, n_lat - 1), k * a)
    return out


def ols3_fit(y, x1, x2, ridge, singular_tol):
    n_s, n_p = y.shape
    X = np.stack([np.ones_like(y), x1, x2], axis=-1)  # (S, P, 3)
    A = np.einsum("spi,spj->pij", X, X)
    b = np.einsum("spi,sp->pi", X, y)
    det = np.linalg.det(A)
    scale = A[:, 0, 0] * A[:, 1, 1] * A[:, 2, 2]
    singular = np.abs(det) <= singular_tol * scale
    lam = ridge * np.trace(A, axis1=1, axis2=2) / 3.0
    lam = np.where(lam == 0.0, ridge, lam)
    A[singular] += lam[singular, None, None] * np.eye(3)
    coef = np.linalg.solve(A, b[..., None])[..., 0]
    return np.ascontiguousarray(coef.T), int(singular.sum())
