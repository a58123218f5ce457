"""Paraxial (ABCD) analysis of a cavity prescription.

Matrices act on ``(x, theta)`` with ``x`` in metres and ``theta`` the
geometric ray angle in radians.  The round-trip matrix is composed along the
same unfolded surface path used by the ray tracer, so for an inverting
array cavity it spans the doubled trajectory.

Gaussian beams use ``q = z + i z_R`` with ``q' = (A q + B) / (C q + D)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .prescription import CavityPrescription, surfaces_for, unfold_round_trip


class NoStableMode(ValueError):
    """Raised when ``|trace/2| >= 1`` and no confined eigenmode exists."""


def propagation(d: float) -> np.ndarray:
    return np.array([[1.0, d], [0.0, 1.0]])


def thin_lens(f: float) -> np.ndarray:
    return np.array([[1.0, 0.0], [-1.0 / f, 1.0]])


def refraction(curvature: float, n1: float, n2: float) -> np.ndarray:
    """Refraction at a surface of signed curvature (1/m) along the travel direction."""
    return np.array([[1.0, 0.0], [(n1 - n2) * curvature / n2, n1 / n2]])


def mirror(curvature: float) -> np.ndarray:
    """Reflection, unfolded. ``curvature`` signed along the incoming direction."""
    return np.array([[1.0, 0.0], [2.0 * curvature, 1.0]])


def _path_matrices(p: CavityPrescription, doubled=None):
    """Yield (z_m of surface, matrix of the surface, index after) along the path."""
    seq = unfold_round_trip(p, doubled=doubled)
    surfs = surfaces_for(p)
    for st in seq.surface_path:
        s = surfs[st.element][st.surface]
        c = s.curvature * 1e3 * st.direction
        if st.direction > 0:
            n1, n2 = s.n_minus, s.n_plus
        else:
            n1, n2 = s.n_plus, s.n_minus
        if s.action == "reflect":
            m = mirror(c)
            n_after = n1
        elif s.action == "refract":
            m = refraction(c, n1, n2)
            n_after = n2
        else:
            m = np.eye(2)
            n_after = n1
        yield s.z_mm * 1e-3, m, n_after, st.direction


def _to_reference(p: CavityPrescription, z_ref_mm: float) -> np.ndarray:
    """Matrix from the near-mirror plane to ``z_ref_mm`` on the outgoing leg."""
    z0 = p.elements[0].position_mm * 1e-3
    zr = z_ref_mm * 1e-3
    if zr < z0:
        raise ValueError("reference plane lies outside the cavity")
    m = np.eye(2)
    z = z0
    n = 1.0
    for zs, ms, n_after, direction in _path_matrices(p, doubled=False):
        if direction < 0 or zs > zr:
            break
        m = propagation(zs - z) @ m
        m = ms @ m
        z, n = zs, n_after
    if n != 1.0:
        raise ValueError("reference plane must lie in air between elements")
    return propagation(zr - z) @ m


def round_trip_matrix(p: CavityPrescription, reference=None, doubled=None) -> np.ndarray:
    """Round-trip ABCD matrix.

    Args:
        p: cavity prescription.
        reference: ``None`` for the near-mirror plane, ``"atom"`` for the
            prescription's atom plane, or an axial position in mm on the
            outgoing leg.
        doubled: override the prescription's doubled-trajectory setting.
    """
    z0 = p.elements[0].position_mm * 1e-3
    m = np.eye(2)
    z = z0
    for zs, ms, _n, _d in _path_matrices(p, doubled=doubled):
        m = propagation(abs(zs - z)) @ m
        m = ms @ m
        z = zs
    if reference is None:
        return m
    if isinstance(reference, str):
        if reference != "atom":
            raise ValueError(f"unknown reference {reference!r}")
        if p.atom_plane_mm is None:
            raise ValueError("prescription has no atom_plane_mm")
        reference = p.atom_plane_mm
    a = _to_reference(p, float(reference))
    # exact inverse of a unimodular matrix
    ainv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / np.linalg.det(a)
    return a @ m @ ainv


@dataclass(frozen=True)
class BeamParam:
    """Gaussian beam state at a reference plane.

    ``waist_um`` is the beam waist sqrt(lambda Im(q)/pi); ``spot_um`` is the
    1/e^2 radius at the reference plane itself.
    """

    q: complex
    waist_um: float
    gouy_rad: float
    wavelength_nm: float
    spot_um: float
    half_trace: float


def eigen_mode(matrix, wavelength_nm: float) -> BeamParam:
    """Self-consistent beam of a round-trip matrix.

    Raises:
        NoStableMode: if ``|trace/2| >= 1``.
    """
    mat = np.asarray(matrix, dtype=float)
    det = np.linalg.det(mat)
    if det > 0:
        # same medium at both ends: remove rounding drift from unimodularity
        mat = mat / math.sqrt(det)
    (a, b), (c, d) = mat
    m = 0.5 * (a + d)
    if not abs(m) < 1.0:
        raise NoStableMode(f"|trace/2| = {abs(m):.6g} >= 1")
    lam = wavelength_nm * 1e-9
    s = math.sqrt(1.0 - m * m)
    inv_q = complex((d - a) / (2.0 * b), -s / abs(b))
    q = 1.0 / inv_q
    theta = math.acos(m)
    gouy = theta if b > 0 else 2.0 * math.pi - theta
    waist = math.sqrt(lam * q.imag / math.pi)
    spot = math.sqrt(-lam / (math.pi * inv_q.imag))
    return BeamParam(q=q, waist_um=waist * 1e6, gouy_rad=gouy, wavelength_nm=wavelength_nm,
                     spot_um=spot * 1e6, half_trace=m)


def propagate_q(q: complex, matrix) -> complex:
    (a, b), (c, d) = np.asarray(matrix, dtype=float)
    return (a * q + b) / (c * q + d)


@dataclass
class StabilityScan:
    """Samples of a longitudinal element scan; unstable points have NaN waist."""

    element: str
    axis: str
    displacement_mm: np.ndarray
    waist_um: np.ndarray
    gouy_rad: np.ndarray
    stable: np.ndarray
    half_trace: np.ndarray

    def stable_width_mm(self) -> float:
        """Width of the stable island around the most stable sample.

        Edges are located by linear interpolation of ``|trace/2| - 1``.
        """
        g = np.abs(self.half_trace) - 1.0
        if not self.stable.any():
            return 0.0
        x = self.displacement_mm
        centre = int(np.argmin(np.where(self.stable, np.abs(x - x[self.stable].mean()), np.inf)))
        lo = centre
        while lo > 0 and self.stable[lo - 1]:
            lo -= 1
        hi = centre
        while hi < len(x) - 1 and self.stable[hi + 1]:
            hi += 1
        if lo == 0 or hi == len(x) - 1:
            raise ValueError("stable region extends past the scan range")
        left = x[lo - 1] + (x[lo] - x[lo - 1]) * g[lo - 1] / (g[lo - 1] - g[lo])
        right = x[hi] + (x[hi + 1] - x[hi]) * g[hi] / (g[hi] - g[hi + 1])
        return float(right - left)


def stability_scan(p: CavityPrescription, element: str, disp_range, steps: int,
                   reference="atom", wavelength_nm=None) -> StabilityScan:
    """Displace ``element`` along z over ``disp_range`` (mm) and sample the eigenmode."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    lo, hi = float(disp_range[0]), float(disp_range[1])
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("range must be finite")
    if reference == "atom" and p.atom_plane_mm is None:
        reference = None
    lam = p.wavelength_trap_nm if wavelength_nm is None else wavelength_nm
    xs = np.linspace(lo, hi, steps)
    w = np.full(steps, np.nan)
    g = np.full(steps, np.nan)
    m2 = np.empty(steps)
    ok = np.zeros(steps, dtype=bool)
    for i, dz in enumerate(xs):
        mat = round_trip_matrix(p.displaced(element, float(dz)), reference)
        m2[i] = 0.5 * np.trace(mat)
        try:
            bp = eigen_mode(mat, lam)
        except NoStableMode:
            continue
        ok[i] = True
        w[i] = bp.waist_um
        g[i] = bp.gouy_rad
    # continuous branch over each stable run
    if ok.any():
        runs = np.split(np.arange(steps), np.where(np.diff(ok.astype(int)) != 0)[0] + 1)
        for r in runs:
            if ok[r[0]]:
                g[r] = np.unwrap(g[r])
    return StabilityScan(element=element, axis="z", displacement_mm=xs, waist_um=w,
                         gouy_rad=g, stable=ok, half_trace=m2)


def analytic_waist(M: float, f_mla: float, wavelength: float, roc: float):
    """Approximate atom-plane waist (1/M) sqrt(f lambda / pi), SI units.

    Returns ``(w0, valid)`` where ``valid`` flags f^2 < 0.01 M^4 ROC^2.
    """
    for v in (M, f_mla, wavelength, roc):
        if not v > 0:
            raise ValueError("inputs must be > 0")
    w0 = math.sqrt(f_mla * wavelength / math.pi) / M
    valid = f_mla ** 2 < 0.01 * M ** 4 * roc ** 2
    return w0, valid


def stable_width(w0: float, wavelength: float) -> float:
    """Full stable displacement range 2 pi w0^2 / lambda (twice the Rayleigh range)."""
    return 2.0 * math.pi * w0 * w0 / wavelength


def mirror_slope_error(d: float, R: float, M: float, w0: float, wavelength: float):
    """Residual slope from the curved mirror for an atom-plane offset ``d``.

    Returns ``(dtheta, ratio)`` with ``ratio = theta_div / dtheta`` (inf at d=0).
    """
    if not (R > 0 and M > 0):
        raise ValueError("R and M must be > 0")
    dtheta = math.atan(2.0 * d / R) / M
    div = wavelength / (math.pi * M * w0)
    ratio = math.inf if dtheta == 0 else div / abs(dtheta)
    return dtheta, ratio
