"""SLM phase masks for the input beam array.

A target at atom-plane position ``(x_m, y_m)`` is produced by a blazed grating
with wavevector ``k_m = 2 pi M_tel / (lambda F) * (x_m, y_m)``.  The mask is
the argument of the superposition of all gratings; the far field is the
squared modulus of the discrete Fourier transform of ``sqrt(I0) exp(i Phi)``.

Far-field conventions: the SLM field is zero-padded by ``pad`` on both axes
before ``numpy.fft.fft2`` (unnormalized) and the result is ``fftshift``-ed, so
DC sits at pixel ``(P/2, P/2)`` with ``P = pad * N``.  Parseval then reads
``sum(I_far) = P * P * sum(I0)``.  Columns are ``x`` and rows are ``y``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_GRID = 512
DEFAULT_PAD = 2
DEFAULT_DISK_PX = 3.0


class HologramError(RuntimeError):
    """A spot left its search window."""


@dataclass(frozen=True)
class HologramSpec:
    """Targets in the atom plane plus optical and SLM constants.

    ``x_um``, ``y_um``: atom-plane target positions; ``amp``, ``phase``: the
    superposition weights (default phases avoid the in-phase sum, which
    defeats the weighted iteration).  ``m_tel`` is the demagnification from the lens
    focal plane to the atom plane, ``f_lens_mm`` the Fourier lens.  The input
    beam is Gaussian with 1/e^2 radius ``input_waist_mm`` unless ``i0`` is
    given explicitly.
    """

    x_um: tuple
    y_um: tuple
    amp: tuple = None
    phase: tuple = None
    m_tel: float = 100.0
    f_lens_mm: float = 200.0
    wavelength_nm: float = 785.0
    grid: int = DEFAULT_GRID
    pitch_um: float = 8.0
    input_waist_mm: float = 0.5
    i0: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x_um))
        y = tuple(float(v) for v in np.atleast_1d(self.y_um))
        if len(x) == 0 or len(x) != len(y):
            raise ValueError("targets must be nonempty with matching x and y")
        n = len(x)
        amp = (1.0,) * n if self.amp is None else tuple(float(v) for v in np.atleast_1d(self.amp))
        # Default phases follow Schroeder's low-crest-factor sequence.
        ph = tuple(math.pi * m * (m + 1) / n for m in range(n)) if self.phase is None else tuple(float(v) for v in np.atleast_1d(self.phase))
        if len(amp) != n or len(ph) != n:
            raise ValueError("amp and phase must match the number of targets")
        if not all(math.isfinite(a) and a >= 0 for a in amp):
            raise ValueError("amplitudes must be finite and >= 0")
        if int(self.grid) < 2:
            raise ValueError("grid must be >= 2")
        if self.m_tel <= 0 or self.f_lens_mm <= 0 or self.wavelength_nm <= 0:
            raise ValueError("m_tel, f_lens_mm and wavelength_nm must be positive")
        object.__setattr__(self, "x_um", x)
        object.__setattr__(self, "y_um", y)
        object.__setattr__(self, "amp", amp)
        object.__setattr__(self, "phase", tuple(p % (2 * math.pi) for p in ph))
        object.__setattr__(self, "grid", int(self.grid))

    @property
    def n_targets(self) -> int:
        return len(self.x_um)

    def slm_coords(self):
        """Pixel-centre coordinates (m) along one axis, centred on the grid."""
        n = self.grid
        return (np.arange(n) - n // 2) * self.pitch_um * 1e-6

    def input_intensity(self) -> np.ndarray:
        if self.i0 is not None:
            i0 = np.asarray(self.i0, dtype=float)
            if i0.shape != (self.grid, self.grid):
                raise ValueError("i0 shape must match the SLM grid")
            return i0
        c = self.slm_coords()
        w = self.input_waist_mm * 1e-3
        g = np.exp(-2.0 * c * c / (w * w))
        return np.outer(g, g)

    def spot_waist_um(self) -> float:
        """Gaussian spot radius in the atom plane for the default input beam."""
        lam = self.wavelength_nm * 1e-9
        w_focal = lam * self.f_lens_mm * 1e-3 / (math.pi * self.input_waist_mm * 1e-3)
        return w_focal / self.m_tel * 1e6

    def with_targets(self, x_um=None, y_um=None, amp=None, phase=None) -> "HologramSpec":
        return replace(
            self,
            x_um=self.x_um if x_um is None else tuple(x_um),
            y_um=self.y_um if y_um is None else tuple(y_um),
            amp=self.amp if amp is None else tuple(amp),
            phase=self.phase if phase is None else tuple(phase),
        )


def grating_wavevectors(spec: HologramSpec) -> np.ndarray:
    """``(n, 2)`` grating wavevectors (rad per metre in the SLM plane)."""
    scale = 2.0 * math.pi * spec.m_tel / (spec.wavelength_nm * 1e-9 * spec.f_lens_mm * 1e-3)
    xy = np.column_stack([spec.x_um, spec.y_um]) * 1e-6
    return scale * xy


def _wrap(phi):
    phi = np.asarray(phi)
    return np.where(phi >= math.pi, phi - 2.0 * math.pi, phi)


def _superposition(spec: HologramSpec) -> np.ndarray:
    c = spec.slm_coords()
    k = grating_wavevectors(spec)
    field_ = np.zeros((spec.grid, spec.grid), dtype=complex)
    for (kx, ky), a, th in zip(k, spec.amp, spec.phase):
        if a == 0.0:
            continue
        field_ += a * np.exp(1j * th) * np.outer(np.exp(1j * ky * c), np.exp(1j * kx * c))
    return field_


def synthesize_phase_mask(spec: HologramSpec) -> np.ndarray:
    """``arg sum_m a_m exp(i (k_m . r + theta_m))`` wrapped to [-pi, pi)."""
    return _wrap(np.angle(_superposition(spec)))


def simulate_farfield(phase, i0, pad: int = DEFAULT_PAD) -> np.ndarray:
    """Far-field intensity on the ``pad``-times zero-padded, shifted grid."""
    phase = np.asarray(phase, dtype=float)
    i0 = np.asarray(i0, dtype=float)
    if phase.shape != i0.shape:
        raise ValueError("phase and intensity arrays must be congruent")
    ny, nx = phase.shape
    a = np.zeros((pad * ny, pad * nx), dtype=complex)
    a[:ny, :nx] = np.sqrt(i0) * np.exp(1j * phase)
    f = np.fft.fftshift(np.fft.fft2(a))
    return f.real ** 2 + f.imag ** 2


def predicted_pixels(spec: HologramSpec, pad: int = DEFAULT_PAD) -> np.ndarray:
    """Far-field ``(row, col)`` of each target on the padded, shifted grid."""
    k = grating_wavevectors(spec)
    p = pad * spec.grid
    frac = k * spec.pitch_um * 1e-6 / (2.0 * math.pi)  # cycles per pixel
    if np.any(np.abs(frac) >= 0.5):
        raise HologramError("target beyond the SLM Nyquist limit")
    col = p // 2 + frac[:, 0] * p
    row = p // 2 + frac[:, 1] * p
    return np.column_stack([row, col])


def spot_powers(intensity, centers, radius: float = DEFAULT_DISK_PX, check: bool = False):
    """Intensity summed over a disk of ``radius`` pixels around each centre.

    With ``check`` the brightest pixel within twice the radius must fall in
    the disk, otherwise :class:`HologramError` is raised.
    """
    intensity = np.asarray(intensity)
    ny, nx = intensity.shape
    r = int(math.ceil(2 * radius))
    out = np.empty(len(centers))
    for i, (cy, cx) in enumerate(centers):
        y0, x0 = int(round(cy)), int(round(cx))
        ys = np.arange(max(0, y0 - r), min(ny, y0 + r + 1))
        xs = np.arange(max(0, x0 - r), min(nx, x0 + r + 1))
        patch = intensity[np.ix_(ys, xs)]
        d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        out[i] = patch[d2 <= radius * radius].sum()
        if check:
            j = np.unravel_index(np.argmax(patch), patch.shape)
            if d2[j] > radius * radius:
                raise HologramError(f"spot {i} left its search window")
    return out


def spot_centroids(intensity, centers, radius: float = DEFAULT_DISK_PX) -> np.ndarray:
    """Intensity-weighted ``(row, col)`` centroid inside each disk."""
    intensity = np.asarray(intensity)
    ny, nx = intensity.shape
    r = int(math.ceil(radius))
    out = np.empty((len(centers), 2))
    for i, (cy, cx) in enumerate(centers):
        y0, x0 = int(round(cy)), int(round(cx))
        ys = np.arange(max(0, y0 - r), min(ny, y0 + r + 1))
        xs = np.arange(max(0, x0 - r), min(nx, x0 + r + 1))
        patch = intensity[np.ix_(ys, xs)]
        mask = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2 <= radius * radius
        w = patch * mask
        s = w.sum()
        out[i] = (w.sum(1) @ ys / s, w.sum(0) @ xs / s)
    return out


def spot_fields(spec: HologramSpec, phase=None) -> np.ndarray:
    """Exact far-field amplitude at each target frequency (separable DFT)."""
    if phase is None:
        phase = synthesize_phase_mask(spec)
    a = np.sqrt(spec.input_intensity()) * np.exp(1j * phase)
    c = spec.slm_coords()
    k = grating_wavevectors(spec)
    ex = np.exp(-1j * np.outer(k[:, 0], c))  # (n, N)
    ey = np.exp(-1j * np.outer(k[:, 1], c))
    rows = a @ ex.T  # (N_y, n): sum over x for each target
    return np.einsum("mn,nm->m", ey, rows)


def uniformity(powers) -> float:
    """Relative standard deviation (std / mean) of spot powers."""
    p = np.asarray(powers, dtype=float)
    if p.size < 2:
        return 0.0
    return float(p.std() / p.mean())


@dataclass
class WGSResult:
    spec: HologramSpec
    phase: np.ndarray
    powers: np.ndarray
    history: list


def wgs_homogenize(spec: HologramSpec, iterations: int = 30, pad: int = DEFAULT_PAD,
                   radius: float = DEFAULT_DISK_PX) -> WGSResult:
    """Weighted Gerchberg-Saxton on the superposition weights.

    Each iteration measures the disk powers ``I_m`` in the simulated far field,
    records ``std/mean`` and updates ``a_m <- a_m sqrt(<I>/I_m)`` and
    ``theta_m <-`` the far-field phase at target ``m``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    i0 = spec.input_intensity()
    centers = predicted_pixels(spec, pad)
    hist = []
    cur = spec
    for _ in range(iterations):
        phase = synthesize_phase_mask(cur)
        far = simulate_farfield(phase, i0, pad)
        powers = spot_powers(far, centers, radius, check=True)
        hist.append(uniformity(powers))
        amp = np.asarray(cur.amp) * np.sqrt(powers.mean() / powers)
        amp /= amp.max()
        theta = np.angle(spot_fields(cur, phase)) % (2 * math.pi)
        cur = cur.with_targets(amp=amp, phase=theta)
    phase = synthesize_phase_mask(cur)
    powers = spot_powers(simulate_farfield(phase, i0, pad), centers, radius, check=True)
    return WGSResult(cur, phase, powers, hist)


# -- position refinement ----------------------------------------------------

def _patch_field(spec: HologramSpec, a_slm, center_um, waist_um, n=15, half_width=2.5):
    """Far field sampled on an ``n x n`` atom-plane patch (separable DFT)."""
    lam = spec.wavelength_nm * 1e-9
    f = spec.f_lens_mm * 1e-3
    u = np.linspace(-half_width, half_width, n) * waist_um
    ux = (center_um[0] + u) * 1e-6 * spec.m_tel
    uy = (center_um[1] + u) * 1e-6 * spec.m_tel
    c = spec.slm_coords()
    kx = 2.0 * math.pi * ux / (lam * f)
    ky = 2.0 * math.pi * uy / (lam * f)
    ex = np.exp(-1j * np.outer(c, kx))  # (N, n)
    ey = np.exp(-1j * np.outer(ky, c))  # (n, N)
    return ey @ a_slm @ ex, u


def mode_overlaps(spec: HologramSpec, centers_um, waist_um=None, phase=None) -> np.ndarray:
    """Power coupled from each spot into a Gaussian mode at its target centre.

    ``|<G|E>|^2 / <G|G>`` evaluated on a local patch; arbitrary units shared
    by all spots of one spec.
    """
    if waist_um is None:
        waist_um = spec.spot_waist_um()
    if phase is None:
        phase = synthesize_phase_mask(spec)
    a = np.sqrt(spec.input_intensity()) * np.exp(1j * phase)
    out = np.empty(len(centers_um))
    for i, cen in enumerate(np.asarray(centers_um, dtype=float)):
        e, u = _patch_field(spec, a, cen, waist_um)
        g1 = np.exp(-u * u / waist_um ** 2)
        g = np.outer(g1, g1)
        out[i] = abs(np.vdot(g, e)) ** 2 / np.vdot(g, g).real
    return out


@dataclass
class PositionResult:
    x_um: np.ndarray
    y_um: np.ndarray
    objective: list
    converged: bool


def optimize_positions(spec: HologramSpec, centers_um, steps=None, max_sweeps: int = 20,
                       waist_um=None) -> PositionResult:
    """Coordinate descent on the commanded spot positions.

    The objective is the total mode-coupled power (see :func:`mode_overlaps`).
    ``steps`` are trial step sizes in units of the spot waist, used from
    largest to smallest; a step is accepted only if the objective increases.
    """
    centers = np.asarray(centers_um, dtype=float).reshape(-1, 2)
    if centers.shape[0] != spec.n_targets:
        raise ValueError("one target mode centre per spot is required")
    if waist_um is None:
        waist_um = spec.spot_waist_um()
    if steps is None:
        steps = (0.1, 0.05, 0.02, 0.01, 0.005)
    x = np.array(spec.x_um)
    y = np.array(spec.y_um)
    if np.any(np.hypot(x - centers[:, 0], y - centers[:, 1]) > 10 * waist_um):
        raise ValueError("initial positions must lie near their target centres")

    def objective(xx, yy):
        return float(mode_overlaps(spec.with_targets(x_um=xx, y_um=yy), centers, waist_um).sum())

    best = objective(x, y)
    hist = [best]
    converged = False
    for step in steps:
        h = step * waist_um
        for _ in range(max_sweeps):
            improved = False
            for i in range(len(x)):
                for arr in (x, y):
                    for sgn in (1.0, -1.0):
                        old = arr[i]
                        arr[i] = old + sgn * h
                        val = objective(x, y)
                        if val > best:
                            best = val
                            hist.append(best)
                            improved = True
                            break
                        arr[i] = old
            if not improved:
                break
        else:
            continue
    else:
        converged = True
    return PositionResult(x, y, hist, converged)


def pgm_bytes(phase) -> bytes:
    """Binary 8-bit PGM of a phase mask, [-pi, pi) mapped to 0..255."""
    phase = np.asarray(phase, dtype=float)
    g = np.floor((phase + math.pi) / (2 * math.pi) * 256.0).clip(0, 255).astype(np.uint8)
    ny, nx = g.shape
    return f"P5\n{nx} {ny}\n255\n".encode("ascii") + g.tobytes()


def write_pgm(path, phase) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(phase))


def read_targets_csv(text: str):
    """Parse ``x_um,y_um,amp,phase`` rows (header required)."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "x_um,y_um,amp,phase":
        raise ValueError("targets CSV must start with header x_um,y_um,amp,phase")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 4 or rows.shape[0] == 0:
        raise ValueError("targets CSV needs at least one row of four numbers")
    return rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]


def square_array(n: int, spacing_um: float = 5.0, **kw) -> HologramSpec:
    """``n x n`` target grid centred on the axis."""
    g = (np.arange(n) - (n - 1) / 2.0) * spacing_um
    xx, yy = np.meshgrid(g, g)
    return HologramSpec(xx.ravel(), yy.ravel(), **kw)
