"""Vectorised numpy ray kernel (fallback when the compiled kernel is absent).

Both kernels consume the same surface table (see ``table.py``) and implement
the same algorithm: Newton intersection with a conic + even-asphere sag,
square-cell lenslet selection, aperture clipping, 3D Snell refraction and
mirror reflection.  Rays are traced in real coordinates (directions flip at
mirrors); indices in the table are already oriented for each traversal.
"""
import numpy as np

from .table import (
    ACT_CLIP, ACT_REFLECT, AP_GRID, COL_A4, COL_A6, COL_A8, COL_A10,
    COL_ACT, COL_APKIND, COL_APR, COL_C, COL_CX, COL_CY, COL_K, COL_LENSLET,
    COL_N1, COL_N2, COL_NX, COL_NY, COL_PITCH, COL_Z, ST_ALIVE, ST_CLIP,
    ST_MISS, ST_NOCONV, ST_TIR,
)


def _sag_terms(row, u, v):
    c, k = row[COL_C], row[COL_K]
    a4, a6, a8, a10 = row[COL_A4], row[COL_A6], row[COL_A8], row[COL_A10]
    r2 = u * u + v * v
    arg = 1.0 - (1.0 + k) * c * c * r2
    bad = arg < 0.0
    sq = np.sqrt(np.where(bad, 1.0, arg))
    sag = c * r2 / (1.0 + sq) + r2 * r2 * (a4 + r2 * (a6 + r2 * (a8 + r2 * a10)))
    g = c / sq + r2 * (4.0 * a4 + r2 * (6.0 * a6 + r2 * (8.0 * a8 + r2 * 10.0 * a10)))
    return sag, g, bad


def _cell_centres(row, x, y):
    pitch = row[COL_PITCH]
    nx, ny = row[COL_NX], row[COL_NY]
    x0 = row[COL_CX] - 0.5 * nx * pitch
    y0 = row[COL_CY] - 0.5 * ny * pitch
    ix = np.clip(np.floor((x - x0) / pitch), 0, nx - 1)
    iy = np.clip(np.floor((y - y0) / pitch), 0, ny - 1)
    # offsets from the array centre are half-integers: exact under x -> -x
    return row[COL_CX] + (ix - 0.5 * (nx - 1)) * pitch, row[COL_CY] + (iy - 0.5 * (ny - 1)) * pitch


def _intersect(row, p, d, tol, maxiter):
    """Return (t, ok_mask, status_for_failures, cx, cy)."""
    n = p.shape[0]
    dz = d[:, 2]
    status = np.zeros(n, dtype=np.int8)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (row[COL_Z] - p[:, 2]) / dz
    status[~np.isfinite(t)] = ST_MISS
    t = np.where(np.isfinite(t), t, 0.0)
    flat = row[COL_C] == 0.0 and row[COL_A4] == 0.0 and row[COL_A6] == 0.0 \
        and row[COL_A8] == 0.0 and row[COL_A10] == 0.0
    if row[COL_LENSLET]:
        xc, yc = _cell_centres(row, p[:, 0] + t * d[:, 0], p[:, 1] + t * d[:, 1])
    else:
        xc = np.full(n, row[COL_CX])
        yc = np.full(n, row[COL_CY])
    if flat:
        return t, status, xc, yc
    for attempt in range(3):
        active = status == 0
        conv = np.zeros(n, dtype=bool)
        for _ in range(maxiter):
            todo = active & ~conv
            if not todo.any():
                break
            x = p[:, 0] + t * d[:, 0]
            y = p[:, 1] + t * d[:, 1]
            z = p[:, 2] + t * dz
            u = x - xc
            v = y - yc
            sag, g, bad = _sag_terms(row, u, v)
            miss = todo & bad
            status[miss] = ST_MISS
            todo &= ~bad
            f = z - row[COL_Z] - sag
            df = dz - g * (u * d[:, 0] + v * d[:, 1])
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(todo, f / df, 0.0)
            t = t - step
            conv |= todo & (np.abs(step) < tol)
        status[active & ~conv & (status == 0)] = ST_NOCONV
        if not row[COL_LENSLET]:
            break
        # re-select the lenslet at the converged point; redo if it changed
        nxc, nyc = _cell_centres(row, p[:, 0] + t * d[:, 0], p[:, 1] + t * d[:, 1])
        moved = (status == 0) & ((nxc != xc) | (nyc != yc))
        if not moved.any():
            break
        xc = np.where(moved, nxc, xc)
        yc = np.where(moved, nyc, yc)
    return t, status, xc, yc


def _apply_surface(row, p, d, tol, maxiter):
    """Advance rays to ``row`` and interact. Returns per-ray status codes."""
    t, status, xc, yc = _intersect(row, p, d, tol, maxiter)
    status[(status == 0) & (t < -tol)] = ST_MISS
    ok = status == 0
    q = p + t[:, None] * d
    # aperture
    if row[COL_APKIND] == AP_GRID:
        hx = 0.5 * row[COL_NX] * row[COL_PITCH]
        hy = 0.5 * row[COL_NY] * row[COL_PITCH]
        out = (np.abs(q[:, 0] - row[COL_CX]) > hx) | (np.abs(q[:, 1] - row[COL_CY]) > hy)
    else:
        rx = q[:, 0] - row[COL_CX]
        ry = q[:, 1] - row[COL_CY]
        out = rx * rx + ry * ry > row[COL_APR] * row[COL_APR]
    status[ok & out] = ST_CLIP
    ok = status == 0
    p[ok] = q[ok]
    act = row[COL_ACT]
    if act == ACT_CLIP or not ok.any():
        return status
    u = q[:, 0] - xc
    v = q[:, 1] - yc
    _, g, _ = _sag_terms(row, u, v)
    nrm = np.stack([-u * g, -v * g, np.ones_like(u)], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    dd = d
    cos_i = np.einsum("ij,ij->i", nrm, dd)
    if act == ACT_REFLECT:
        newd = dd - 2.0 * cos_i[:, None] * nrm
    else:
        sgn = np.where(cos_i < 0.0, -1.0, 1.0)
        nrm = nrm * sgn[:, None]
        cos_i = cos_i * sgn
        mu = row[COL_N1] / row[COL_N2]
        k2 = 1.0 - mu * mu * (1.0 - cos_i * cos_i)
        tir = ok & (k2 < 0.0)
        status[tir] = ST_TIR
        ok = status == 0
        newd = mu * dd + (np.sqrt(np.where(k2 < 0.0, 0.0, k2)) - mu * cos_i)[:, None] * nrm
    newd /= np.linalg.norm(newd, axis=1)[:, None]
    d[ok] = newd[ok]
    return status


def trace_rays(table, pos, dirs, max_trips, tol=1e-12, maxiter=50):
    """Trace rays through ``table`` repeatedly, up to ``max_trips`` passes.

    ``pos``/``dirs`` (N, 3) are updated in place for rays that survive; for
    lost rays they hold the state before the failing surface.

    Returns ``(trips, status, where)``: completed passes, status code
    (ST_ALIVE when the cap was reached) and failing row index (-1 if none).
    """
    table = np.ascontiguousarray(table, dtype=float)
    n = pos.shape[0]
    trips = np.zeros(n, dtype=np.int64)
    status = np.full(n, ST_ALIVE, dtype=np.int8)
    where = np.full(n, -1, dtype=np.int64)
    alive = np.arange(n)
    for _trip in range(int(max_trips)):
        if alive.size == 0:
            break
        p = pos[alive].copy()
        d = dirs[alive].copy()
        lost = np.zeros(alive.size, dtype=bool)
        for j in range(table.shape[0]):
            sub = ~lost
            if not sub.any():
                break
            idx = np.nonzero(sub)[0]
            ps = p[idx]
            ds = d[idx]
            st = _apply_surface(table[j], ps, ds, tol, maxiter)
            good = st == 0
            p[idx[good]] = ps[good]
            d[idx[good]] = ds[good]
            bad = idx[~good]
            if bad.size:
                status[alive[bad]] = st[~good]
                where[alive[bad]] = j
                lost[bad] = True
                # keep the pre-failure state
                pos[alive[bad]] = p[bad]
                dirs[alive[bad]] = d[bad]
        keep = ~lost
        pos[alive[keep]] = p[keep]
        dirs[alive[keep]] = d[keep]
        trips[alive[keep]] += 1
        alive = alive[keep]
    return trips, status, where
