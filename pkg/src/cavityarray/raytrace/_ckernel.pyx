# cython: language_level=3
"""Compiled ray kernel; same algorithm and table layout as ``_pykernel``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, fabs, isfinite

cnp.import_array()

# column indices, kept in sync with table.py
cdef enum:
    C_ACT = 0
    C_Z = 1
    C_C = 2
    C_K = 3
    C_A4 = 4
    C_A6 = 5
    C_A8 = 6
    C_A10 = 7
    C_N1 = 8
    C_N2 = 9
    C_APKIND = 10
    C_APR = 11
    C_PITCH = 12
    C_NX = 13
    C_NY = 14
    C_CX = 15
    C_CY = 16
    C_LENSLET = 17

cdef enum:
    S_OK = 0
    S_CLIP = 1
    S_TIR = 2
    S_NOCONV = 3
    S_MISS = 4


cdef inline void cell_centre(const double* row, double x, double y,
                             double* xc, double* yc) noexcept nogil:
    cdef double pitch = row[C_PITCH]
    cdef double nx = row[C_NX]
    cdef double ny = row[C_NY]
    cdef double x0 = row[C_CX] - 0.5 * nx * pitch
    cdef double y0 = row[C_CY] - 0.5 * ny * pitch
    cdef double ix = floor((x - x0) / pitch)
    cdef double iy = floor((y - y0) / pitch)
    if ix < 0:
        ix = 0
    if ix > nx - 1:
        ix = nx - 1
    if iy < 0:
        iy = 0
    if iy > ny - 1:
        iy = ny - 1
    xc[0] = row[C_CX] + (ix - 0.5 * (nx - 1.0)) * pitch
    yc[0] = row[C_CY] + (iy - 0.5 * (ny - 1.0)) * pitch


cdef inline int sag_terms(const double* row, double u, double v,
                          double* sag, double* g) noexcept nogil:
    cdef double c = row[C_C]
    cdef double k = row[C_K]
    cdef double a4 = row[C_A4]
    cdef double a6 = row[C_A6]
    cdef double a8 = row[C_A8]
    cdef double a10 = row[C_A10]
    cdef double r2 = u * u + v * v
    cdef double arg = 1.0 - (1.0 + k) * c * c * r2
    cdef double sq
    if arg < 0.0:
        return 1
    sq = sqrt(arg)
    sag[0] = c * r2 / (1.0 + sq) + r2 * r2 * (a4 + r2 * (a6 + r2 * (a8 + r2 * a10)))
    g[0] = c / sq + r2 * (4.0 * a4 + r2 * (6.0 * a6 + r2 * (8.0 * a8 + r2 * 10.0 * a10)))
    return 0


cdef int apply_surface(const double* row, double* p, double* d,
                       double tol, int maxiter) noexcept nogil:
    cdef double dz = d[2]
    cdef double t, x, y, z, u, v, sag = 0.0, g = 0.0, f, df, step
    cdef double xc, yc, nxc, nyc, hx, hy, rx, ry
    cdef double n0, n1, n2, nn, cos_i, mu, k2, a
    cdef int it, attempt, conv
    cdef bint flat
    if dz == 0.0:
        return S_MISS
    t = (row[C_Z] - p[2]) / dz
    if not isfinite(t):
        return S_MISS
    flat = (row[C_C] == 0.0 and row[C_A4] == 0.0 and row[C_A6] == 0.0
            and row[C_A8] == 0.0 and row[C_A10] == 0.0)
    if row[C_LENSLET] != 0.0:
        cell_centre(row, p[0] + t * d[0], p[1] + t * d[1], &xc, &yc)
    else:
        xc = row[C_CX]
        yc = row[C_CY]
    if not flat:
        for attempt in range(3):
            conv = 0
            for it in range(maxiter):
                x = p[0] + t * d[0]
                y = p[1] + t * d[1]
                z = p[2] + t * dz
                u = x - xc
                v = y - yc
                if sag_terms(row, u, v, &sag, &g):
                    return S_MISS
                f = z - row[C_Z] - sag
                df = dz - g * (u * d[0] + v * d[1])
                step = f / df
                t = t - step
                if fabs(step) < tol:
                    conv = 1
                    break
            if not conv:
                return S_NOCONV
            if row[C_LENSLET] == 0.0:
                break
            cell_centre(row, p[0] + t * d[0], p[1] + t * d[1], &nxc, &nyc)
            if nxc == xc and nyc == yc:
                break
            xc = nxc
            yc = nyc
    if t < -tol:
        return S_MISS
    x = p[0] + t * d[0]
    y = p[1] + t * d[1]
    z = p[2] + t * dz
    if row[C_APKIND] == 1.0:
        hx = 0.5 * row[C_NX] * row[C_PITCH]
        hy = 0.5 * row[C_NY] * row[C_PITCH]
        if fabs(x - row[C_CX]) > hx or fabs(y - row[C_CY]) > hy:
            return S_CLIP
    else:
        rx = x - row[C_CX]
        ry = y - row[C_CY]
        if rx * rx + ry * ry > row[C_APR] * row[C_APR]:
            return S_CLIP
    if row[C_ACT] == 2.0:
        p[0] = x
        p[1] = y
        p[2] = z
        return S_OK
    u = x - xc
    v = y - yc
    if sag_terms(row, u, v, &sag, &g):
        return S_MISS
    n0 = -u * g
    n1 = -v * g
    n2 = 1.0
    nn = sqrt(n0 * n0 + n1 * n1 + n2 * n2)
    n0 /= nn
    n1 /= nn
    n2 /= nn
    cos_i = n0 * d[0] + n1 * d[1] + n2 * d[2]
    if row[C_ACT] == 1.0:
        d[0] = d[0] - 2.0 * cos_i * n0
        d[1] = d[1] - 2.0 * cos_i * n1
        d[2] = d[2] - 2.0 * cos_i * n2
    else:
        if cos_i < 0.0:
            n0 = -n0
            n1 = -n1
            n2 = -n2
            cos_i = -cos_i
        mu = row[C_N1] / row[C_N2]
        k2 = 1.0 - mu * mu * (1.0 - cos_i * cos_i)
        if k2 < 0.0:
            return S_TIR
        a = sqrt(k2) - mu * cos_i
        d[0] = mu * d[0] + a * n0
        d[1] = mu * d[1] + a * n1
        d[2] = mu * d[2] + a * n2
    nn = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    d[0] /= nn
    d[1] /= nn
    d[2] /= nn
    p[0] = x
    p[1] = y
    p[2] = z
    return S_OK


def trace_rays(const double[:, ::1] table, double[:, ::1] pos, double[:, ::1] dirs,
               long max_trips, double tol=1e-12, int maxiter=50):
    """Compiled counterpart of ``_pykernel.trace_rays`` (same contract)."""
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t nrow = table.shape[0]
    cdef Py_ssize_t i, j
    cdef long trip
    cdef int st
    cdef double p[3]
    cdef double d[3]
    trips_a = np.zeros(n, dtype=np.int64)
    status_a = np.zeros(n, dtype=np.int8)
    where_a = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] trips = trips_a
    cdef signed char[::1] status = status_a
    cdef long long[::1] where = where_a
    with nogil:
        for i in range(n):
            p[0] = pos[i, 0]
            p[1] = pos[i, 1]
            p[2] = pos[i, 2]
            d[0] = dirs[i, 0]
            d[1] = dirs[i, 1]
            d[2] = dirs[i, 2]
            st = S_OK
            for trip in range(max_trips):
                for j in range(nrow):
                    st = apply_surface(&table[j, 0], p, d, tol, maxiter)
                    if st != S_OK:
                        where[i] = j
                        break
                if st != S_OK:
                    break
                trips[i] += 1
            status[i] = st
            pos[i, 0] = p[0]
            pos[i, 1] = p[1]
            pos[i, 2] = p[2]
            dirs[i, 0] = d[0]
            dirs[i, 1] = d[1]
            dirs[i, 2] = d[2]
    return trips_a, status_a, where_a
