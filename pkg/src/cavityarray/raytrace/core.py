"""Exact sequential ray tracing through the unfolded cavity.

Rays are launched at the near (first) mirror plane heading towards +z.  A
round trip ends with the reflection at that mirror.  Transverse states are
``(x, slope)`` with ``slope = dx/dz``, positions in metres.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..prescription import CavityPrescription, SurfaceSequence
from . import kernel as _kernel
from .table import (
    COL_ELEM, ST_ALIVE, ST_NOCONV, ST_MISS, ST_TIR, STATUS_NAMES,
    build_table, table_for_sequence,
)

NEWTON_TOL = 1e-12
NEWTON_MAXITER = 50


class IntersectionError(RuntimeError):
    """Newton iteration failed or the ray missed a surface."""

    def __init__(self, surface_index: int, reason: str):
        super().__init__(f"surface {surface_index}: {reason}")
        self.surface_index = surface_index
        self.reason = reason


@dataclass
class Ray:
    """Geometric ray: position (m), unit direction, alive flag, round trips."""

    position: np.ndarray
    direction: np.ndarray
    alive: bool = True
    round_trips: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        self.direction = d / np.linalg.norm(d)

    @classmethod
    def launch(cls, x=0.0, y=0.0, slope_x=0.0, slope_y=0.0, z=0.0) -> "Ray":
        """Ray at ``(x, y, z)`` (m) travelling towards +z with slopes dx/dz, dy/dz."""
        return cls(np.array([x, y, z]), np.array([slope_x, slope_y, 1.0]))

    def state(self, z_plane=None) -> np.ndarray:
        """``(x, y, dx/dz, dy/dz)``, transported to ``z_plane`` if given (air)."""
        p, d = self.position, self.direction
        sx, sy = d[0] / d[2], d[1] / d[2]
        if z_plane is None:
            return np.array([p[0], p[1], sx, sy])
        dz = z_plane - p[2]
        return np.array([p[0] + sx * dz, p[1] + sy * dz, sx, sy])


@dataclass(frozen=True)
class Clipped:
    """Ray lost at ``surface_index`` of the unfolded surface path."""

    surface_index: int
    element: str
    reason: str
    ray: Ray

    @property
    def total_internal_reflection(self) -> bool:
        return self.reason == STATUS_NAMES[ST_TIR]


def _launch_z(p: CavityPrescription) -> float:
    return p.elements[0].position_mm * 1e-3


def trace_segment(ray: Ray, sequence: SurfaceSequence, kernel=None):
    """Propagate ``ray`` through one full unfolded trajectory.

    Returns the outgoing :class:`Ray` or :class:`Clipped`.

    Raises:
        IntersectionError: if a surface intersection cannot be found.
    """
    if not ray.alive:
        raise ValueError("ray is not alive")
    table = table_for_sequence(sequence)
    fn = kernel or _kernel.trace_rays
    pos = ray.position.reshape(1, 3).copy()
    dirs = ray.direction.reshape(1, 3).copy()
    trips, status, where = fn(table, pos, dirs, 1, NEWTON_TOL, NEWTON_MAXITER)
    st = int(status[0])
    if st in (ST_NOCONV, ST_MISS):
        raise IntersectionError(int(where[0]), STATUS_NAMES[st])
    if st != ST_ALIVE:
        j = int(where[0])
        name = sequence.prescription.elements[int(table[j, COL_ELEM])].name
        lost = Ray(pos[0], dirs[0], alive=False, round_trips=ray.round_trips)
        return Clipped(j, name, STATUS_NAMES[st], lost)
    n_rt = 2 if len(sequence.steps) > 2 * (len(sequence.prescription.elements) - 1) else 1
    return Ray(pos[0], dirs[0], alive=True, round_trips=ray.round_trips + n_rt)


def _threads(threads):
    if threads is None:
        env = os.environ.get("CAVITYARRAY_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def trace_many(p: CavityPrescription, pos, dirs, cap: int, doubled=False, threads=None, kernel=None):
    """Trace many rays for up to ``cap`` passes of the (single) round trip.

    Returns ``(trips, status, where, pos, dirs)``. Chunks are independent so
    the result does not depend on the thread count.
    """
    table = build_table(p, doubled=doubled)
    fn = kernel or _kernel.trace_rays
    pos = np.ascontiguousarray(pos, dtype=float).copy()
    dirs = np.ascontiguousarray(dirs, dtype=float).copy()
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    n = pos.shape[0]
    nthreads = _threads(threads)
    if nthreads == 1 or n < 64:
        trips, status, where = fn(table, pos, dirs, cap, NEWTON_TOL, NEWTON_MAXITER)
        return trips, status, where, pos, dirs
    bounds = np.linspace(0, n, min(nthreads * 4, n) + 1).astype(int)
    chunks = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def work(ab):
        a, b = ab
        pp = np.ascontiguousarray(pos[a:b])
        dd = np.ascontiguousarray(dirs[a:b])
        out = fn(table, pp, dd, cap, NEWTON_TOL, NEWTON_MAXITER)
        return a, b, out, pp, dd

    trips = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int8)
    where = np.zeros(n, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=nthreads) as ex:
        for a, b, (t, s, w), pp, dd in ex.map(work, chunks):
            trips[a:b], status[a:b], where[a:b] = t, s, w
            pos[a:b], dirs[a:b] = pp, dd
    return trips, status, where, pos, dirs


def round_trips_until_clip(ray: Ray, p: CavityPrescription, cap: int = 100, kernel=None) -> int:
    """Completed round trips before the ray is lost, saturating at ``cap``.

    Intersection failures raise :class:`IntersectionError`.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    trips, status, where, _, _ = trace_many(
        p, ray.position.reshape(1, 3), ray.direction.reshape(1, 3), cap, threads=1, kernel=kernel
    )
    if int(status[0]) in (ST_NOCONV, ST_MISS):
        raise IntersectionError(int(where[0]), STATUS_NAMES[int(status[0])])
    return int(trips[0])


@dataclass
class SurvivalMap:
    """Round-trip counts on a launch grid at the near-mirror plane.

    ``counts[j, i]`` belongs to ``(x_mm[i], y_mm[j])``.
    """

    x_mm: np.ndarray
    y_mm: np.ndarray
    counts: np.ndarray
    cap: int
    status: np.ndarray | None = None

    def rows(self):
        """``(x_mm, y_mm, round_trips)`` in row-major order (y outer)."""
        xx, yy = np.meshgrid(self.x_mm, self.y_mm)
        return np.column_stack([xx.ravel(), yy.ravel(), self.counts.ravel()])


def grid_axis(center_mm: float, span_mm: float, n: int) -> np.ndarray:
    """Cell centres of ``n`` cells covering ``span_mm`` around ``center_mm``."""
    # half-integer offsets keep the grid exactly symmetric about its centre
    return center_mm + (np.arange(n) - 0.5 * (n - 1)) * (span_mm / n)


def survival_map(p: CavityPrescription, center_mm=(0.0, 0.0), span_mm=10.0, resolution=(64, 64),
                 cap: int = 100, slope=(0.0, 0.0), threads=None, kernel=None) -> SurvivalMap:
    """Zero-slope (by default) launches on a rectangular grid; counts per cell.

    Intersection failures count as losses; the per-cell status is kept.
    """
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    sx, sy = (span_mm, span_mm) if np.isscalar(span_mm) else span_mm
    if nx < 1 or ny < 1:
        raise ValueError("grid must be nonempty")
    xs = grid_axis(center_mm[0], sx, nx)
    ys = grid_axis(center_mm[1], sy, ny)
    xx, yy = np.meshgrid(xs, ys)
    n = xx.size
    pos = np.column_stack([xx.ravel() * 1e-3, yy.ravel() * 1e-3, np.full(n, _launch_z(p))])
    dirs = np.tile(np.array([slope[0], slope[1], 1.0]), (n, 1))
    trips, status, _, _, _ = trace_many(p, pos, dirs, cap, threads=threads, kernel=kernel)
    return SurvivalMap(xs, ys, trips.reshape(ny, nx), cap, status.reshape(ny, nx))


def round_trip_map(p: CavityPrescription, states, kernel=None) -> np.ndarray:
    """Trace ``(x, y, sx, sy)`` launch states through one closed trajectory.

    Returns output states at the near-mirror plane; rows of lost rays are NaN.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    z0 = _launch_z(p)
    n = states.shape[0]
    pos = np.column_stack([states[:, 0], states[:, 1], np.full(n, z0)])
    dirs = np.column_stack([states[:, 2], states[:, 3], np.ones(n)])
    table = build_table(p)
    fn = kernel or _kernel.trace_rays
    pos = np.ascontiguousarray(pos)
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=1)[:, None])
    trips, status, where = fn(table, pos, dirs, 1, NEWTON_TOL, NEWTON_MAXITER)
    sx = dirs[:, 0] / dirs[:, 2]
    sy = dirs[:, 1] / dirs[:, 2]
    dz = z0 - pos[:, 2]
    out = np.column_stack([pos[:, 0] + sx * dz, pos[:, 1] + sy * dz, sx, sy])
    out[status != ST_ALIVE] = np.nan
    return out


def effective_abcd(p: CavityPrescription, guide: Ray, probe_step: float = 1e-7,
                   slope_step: float | None = None, kernel=None, richardson: bool = True) -> dict:
    """Central finite-difference Jacobian of the closed-trajectory map.

    With ``richardson`` the differences at steps ``h`` and ``h/2`` are
    combined as ``(4 D(h/2) - D(h)) / 3``, cancelling the third-order
    aberration term that otherwise biases the result by ``O(h^2)``.

    Returns ``{"x": 2x2, "y": 2x2, "full": 4x4}`` acting on ``(position, slope)``.

    Raises:
        ValueError: if the guide ray or a probe ray is lost.
    """
    if slope_step is None:
        slope_step = probe_step / max(p.total_length_mm * 1e-3, 1e-3)
    g = guide.state(_launch_z(p))
    base = np.array([probe_step, probe_step, slope_step, slope_step])
    scales = (1.0, 0.5) if richardson else (1.0,)
    probes = [g]
    for sc in scales:
        for k in range(4):
            for sgn in (1.0, -1.0):
                s = g.copy()
                s[k] += sgn * sc * base[k]
                probes.append(s)
    out = round_trip_map(p, np.array(probes), kernel=kernel)
    if np.isnan(out).any():
        raise ValueError("guide ray (or a probe) is clipped within one round trip")
    jacs = []
    for j, sc in enumerate(scales):
        jac = np.empty((4, 4))
        for k in range(4):
            i = 1 + 8 * j + 2 * k
            jac[:, k] = (out[i] - out[i + 1]) / (2.0 * sc * base[k])
        jacs.append(jac)
    jac = (4.0 * jacs[1] - jacs[0]) / 3.0 if richardson else jacs[0]
    return {
        "x": jac[np.ix_([0, 2], [0, 2])],
        "y": jac[np.ix_([1, 3], [1, 3])],
        "full": jac,
    }


def refract(d, normal, n1: float, n2: float):
    """Vector Snell refraction of unit ``d`` at a surface with unit ``normal``.

    Returns the refracted unit direction, or ``None`` on total internal
    reflection.
    """
    d = np.asarray(d, dtype=float)
    nrm = np.asarray(normal, dtype=float)
    cos_i = float(nrm @ d)
    if cos_i < 0.0:
        nrm, cos_i = -nrm, -cos_i
    mu = n1 / n2
    k2 = 1.0 - mu * mu * (1.0 - cos_i * cos_i)
    if k2 < 0.0:
        return None
    out = mu * d + (np.sqrt(k2) - mu * cos_i) * nrm
    return out / np.linalg.norm(out)


def reflect(d, normal):
    d = np.asarray(d, dtype=float)
    nrm = np.asarray(normal, dtype=float)
    out = d - 2.0 * float(nrm @ d) * nrm
    return out / np.linalg.norm(out)
