# cython: language_level=3
"""Compiled spatial-filter and per-gridpoint regression kernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def convolve_lon_periodic(const double[:, ::1] a, const double[::1] kernel):
    cdef Py_ssize_t n_lat = a.shape[0], n_lon = a.shape[1]
    cdef Py_ssize_t nk = kernel.shape[0], r = nk // 2
    cdef Py_ssize_t i, j, m, jj
    cdef double k
    out = np.zeros((n_lat, n_lon), dtype=np.float64)
    cdef double[:, ::1] o = out
    # one wrap-padded copy of the row keeps the inner loop contiguous and branch-free
    cdef double[::1] row = np.empty(n_lon + nk - 1, dtype=np.float64)
    for i in range(n_lat):
        for j in range(n_lon + nk - 1):
            jj = (j - r) % n_lon
            if jj < 0:
                jj += n_lon
            row[j] = a[i, jj]
        for m in range(nk):
            k = kernel[m]
            for j in range(n_lon):
                o[i, j] += k * row[j + m]
    return out


def convolve_lat_edge(const double[:, ::1] a, const double[::1] kernel):
    cdef Py_ssize_t n_lat = a.shape[0], n_lon = a.shape[1]
    cdef Py_ssize_t nk = kernel.shape[0], r = nk // 2
    cdef Py_ssize_t i, j, m, ii
    cdef double k
    out = np.zeros((n_lat, n_lon), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n_lat):
        for m in range(nk):
            ii = i + m - r
            if ii < 0:
                ii = 0
            elif ii > n_lat - 1:
                ii = n_lat - 1
            k = kernel[m]
            for j in range(n_lon):
                o[i, j] += k * a[ii, j]
    return out


def convolve_lat_edge_adjoint(const double[:, ::1] a, const double[::1] kernel):
    cdef Py_ssize_t n_lat = a.shape[0], n_lon = a.shape[1]
    cdef Py_ssize_t nk = kernel.shape[0], r = nk // 2
    cdef Py_ssize_t i, j, m, ii
    cdef double k
    out = np.zeros((n_lat, n_lon), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n_lat):
        for m in range(nk):
            ii = i + m - r
            if ii < 0:
                ii = 0
            elif ii > n_lat - 1:
                ii = n_lat - 1
            k = kernel[m]
            for j in range(n_lon):
                o[ii, j] += k * a[i, j]
    return out


cdef int _solve3(double[3][3] A, double[3] b, double[3] x) noexcept nogil:
    # Gaussian elimination with partial pivoting; returns 1 on a zero pivot.
    cdef int i, j, k, p
    cdef double t, f
    for k in range(3):
        p = k
        for i in range(k + 1, 3):
            if fabs(A[i][k]) > fabs(A[p][k]):
                p = i
        if A[p][k] == 0.0:
            return 1
        if p != k:
            for j in range(3):
                t = A[k][j]; A[k][j] = A[p][j]; A[p][j] = t
            t = b[k]; b[k] = b[p]; b[p] = t
        for i in range(k + 1, 3):
            f = A[i][k] / A[k][k]
            for j in range(k, 3):
                A[i][j] -= f * A[k][j]
            b[i] -= f * b[k]
    for i in range(2, -1, -1):
        t = b[i]
        for j in range(i + 1, 3):
            t -= A[i][j] * x[j]
        x[i] = t / A[i][i]
    return 0


def ols3_fit(const double[:, ::1] y, const double[:, ::1] x1,
             const double[:, ::1] x2, double ridge, double singular_tol):
    """Per-column least squares of y on [1, x1, x2]; returns (coef[3, P], n_ridge)."""
    cdef Py_ssize_t n_s = y.shape[0], n_p = y.shape[1]
    cdef Py_ssize_t s, p
    cdef int i, j, n_ridge = 0
    cdef double[3][3] A
    cdef double[3][3] Ac
    cdef double[3] b
    cdef double[3] bc
    cdef double[3] x
    cdef double[3] row
    cdef double det, scale, lam
    out = np.empty((3, n_p), dtype=np.float64)
    cdef double[:, ::1] o = out
    for p in range(n_p):
        for i in range(3):
            b[i] = 0.0
            for j in range(3):
                A[i][j] = 0.0
        for s in range(n_s):
            row[0] = 1.0
            row[1] = x1[s, p]
            row[2] = x2[s, p]
            for i in range(3):
                b[i] += row[i] * y[s, p]
                for j in range(3):
                    A[i][j] += row[i] * row[j]
        det = (A[0][0] * (A[1][1] * A[2][2] - A[1][2] * A[2][1])
               - A[0][1] * (A[1][0] * A[2][2] - A[1][2] * A[2][0])
               + A[0][2] * (A[1][0] * A[2][1] - A[1][1] * A[2][0]))
        scale = A[0][0] * A[1][1] * A[2][2]
        if fabs(det) <= singular_tol * scale:
            lam = ridge * (A[0][0] + A[1][1] + A[2][2]) / 3.0
            if lam == 0.0:
                lam = ridge
            for i in range(3):
                A[i][i] += lam
            n_ridge += 1
        for i in range(3):
            bc[i] = b[i]
            for j in range(3):
                Ac[i][j] = A[i][j]
        if _solve3(Ac, bc, x) != 0:
            x[0] = 0.0; x[1] = 0.0; x[2] = 0.0
        for i in range(3):
            o[i, p] = x[i]
    return out, n_ridge
