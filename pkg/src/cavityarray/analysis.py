"""Readout statistics: frame post-processing, bimodal fits and discrimination
fidelity, correlations, survival and trap-waist fits, finesse and lens-scan
fits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from scipy.ndimage import gaussian_filter
from scipy.signal import find_peaks
from scipy.special import log_ndtr

from .atomsim import lorentzian_dip, triangle_wave

# Fraction of the total trap light shift that is trap depth (ground-state
# shift over the sum of ground and excited shifts for the trap wavelength).
LIGHT_SHIFT_DEPTH_FACTOR = 0.43
MIN_BIMODAL_SAMPLES = 100
BINNED_ABOVE = 5000


class FitError(RuntimeError):
    """A fit did not converge; ``residual`` holds the last objective value."""

    def __init__(self, msg, residual=float("nan")):
        super().__init__(f"{msg} (residual {residual:.6g})")
        self.residual = residual


# -- frames ----------------------------------------------------------------

def windows_from_centers(centers, half: int = 2):
    """Square ``(r0, r1, c0, c1)`` windows of side ``2 half + 1`` around centres."""
    out = []
    for cy, cx in np.asarray(centers, dtype=float):
        r, c = int(round(cy)), int(round(cx))
        out.append((r - half, r + half + 1, c - half, c + half + 1))
    return out


def _check_windows(shape, windows):
    ny, nx = shape
    for r0, r1, c0, c1 in windows:
        if r1 <= r0 or c1 <= c0:
            raise ValueError("empty window")
        if r0 < 0 or c0 < 0 or r1 > ny or c1 > nx:
            raise ValueError("window outside the frame")


def window_sums(frames, windows, offset: float = 0.0) -> np.ndarray:
    """Raw per-window sums of ``frames - offset``; ``(shots, n_windows)``."""
    f = np.asarray(frames, dtype=float)
    f = f[None] if f.ndim == 2 else f
    _check_windows(f.shape[1:], windows)
    return np.stack([(f[:, r0:r1, c0:c1] - offset).sum(axis=(1, 2)) for r0, r1, c0, c1 in windows], axis=1)


def pair_ports(scores, pairing) -> np.ndarray:
    """Sum scores over port groups (e.g. the two conjugate ports per cavity)."""
    scores = np.asarray(scores, dtype=float)
    return np.stack([scores[:, list(g)].sum(axis=1) for g in pairing], axis=1)


def postprocess_frame(frames, threshold: float, kernel_sigma: float, windows, pairing=None) -> np.ndarray:
    """Binarize at ``threshold``, smooth with a Gaussian, sum per window.

    ``frames`` is ``(ny, nx)`` or ``(shots, ny, nx)``; the result is
    ``(shots, n_windows)``, or ``(shots, n_groups)`` when ``pairing`` lists
    the window indices to add per cavity.
    """
    f = np.asarray(frames)
    f = f[None] if f.ndim == 2 else f
    _check_windows(f.shape[1:], windows)
    b = (f > threshold).astype(float)
    if kernel_sigma > 0:
        b = gaussian_filter(b, sigma=(0, kernel_sigma, kernel_sigma), mode="constant")
    s = np.stack([b[:, r0:r1, c0:c1].sum(axis=(1, 2)) for r0, r1, c0, c1 in windows], axis=1)
    return s if pairing is None else pair_ports(s, pairing)


# -- bimodal fits ----------------------------------------------------------

MODELS = ("gaussian", "skew-gaussian")


@dataclass
class BimodalFit:
    """Two-component fit, components ordered by mean (empty first).

    ``loc``, ``scale``, ``shape`` parameterize ``scipy.stats.skewnorm``
    (``shape = 0`` is Gaussian).
    """

    model: str
    weights: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    shape: np.ndarray
    threshold: float
    fidelity: float
    loglik: float

    @property
    def means(self) -> np.ndarray:
        d = self.shape / np.sqrt(1 + self.shape ** 2)
        return self.loc + self.scale * d * math.sqrt(2 / math.pi)

    def cdf(self, k, x):
        return stats.skewnorm.cdf(x, self.shape[k], self.loc[k], self.scale[k])


def misclassification(weights, cdfs, theta) -> float:
    """``P0 P(s > theta | 0) + P1 P(s < theta | 1)``."""
    return weights[0] * (1.0 - cdfs[0](theta)) + weights[1] * cdfs[1](theta)


def discrimination_fidelity(weights, cdfs, lo: float, hi: float, n: int = 2001):
    """``(fidelity, threshold)`` minimizing the prior-weighted misclassification.

    The search covers ``[lo, hi]`` plus the two trivial classifiers, so the
    fidelity is at least ``max(P0, P1) >= 0.5``.
    """
    grid = np.linspace(lo, hi, n)
    err = misclassification(weights, cdfs, grid)
    i = int(np.argmin(err))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n - 1)]
    if b > a:
        r = optimize.minimize_scalar(lambda t: misclassification(weights, cdfs, t),
                                     bounds=(a, b), method="bounded", options={"xatol": 1e-10 * (hi - lo)})
        theta, e = (float(r.x), float(r.fun)) if r.fun <= err[i] else (float(grid[i]), float(err[i]))
    else:
        theta, e = float(grid[i]), float(err[i])
    trivial = min(weights[0], weights[1])
    if trivial < e:
        e = trivial
        theta = hi if weights[0] >= weights[1] else lo
    return 1.0 - e, theta


def _two_means(z):
    """1-D two-means split; returns the boolean mask of the upper cluster."""
    c = np.percentile(z, [25, 75])
    for _ in range(50):
        up = np.abs(z - c[1]) < np.abs(z - c[0])
        if up.all() or (~up).all():
            break
        new = np.array([z[~up].mean(), z[up].mean()])
        if np.allclose(new, c):
            break
        c = new
    return up


_LOG2 = math.log(2.0)
_LOGSQRT2PI = 0.5 * math.log(2.0 * math.pi)


def _skewnorm_logpdf(z, a, loc, scale):
    u = (z - loc) / scale
    return _LOG2 - _LOGSQRT2PI - 0.5 * u * u - math.log(scale) + log_ndtr(a * u)


def _nll(params, z, skew, wts=None):
    w = 1.0 / (1.0 + math.exp(-params[0]))
    l0, l1 = params[1], params[2]
    s0, s1 = math.exp(params[3]), math.exp(params[4])
    a0, a1 = (params[5], params[6]) if skew else (0.0, 0.0)
    lp0 = _skewnorm_logpdf(z, a0, l0, s0) + math.log(max(1 - w, 1e-300))
    lp1 = _skewnorm_logpdf(z, a1, l1, s1) + math.log(max(w, 1e-300))
    ll = np.logaddexp(lp0, lp1)
    return -(ll.sum() if wts is None else ll @ wts)


def _minimize(starts, z, skew, wts=None):
    """L-BFGS-B from every start, then a Nelder-Mead polish of the best."""
    r = min((optimize.minimize(_nll, p0, args=(z, skew, wts), method="L-BFGS-B") for p0 in starts),
            key=lambda q: q.fun if np.isfinite(q.fun) else np.inf)
    r2 = optimize.minimize(_nll, r.x, args=(z, skew, wts), method="Nelder-Mead",
                           options={"xatol": 1e-8, "fatol": 1e-8, "maxiter": 5000, "maxfev": 5000})
    return r2 if r2.fun <= r.fun else r


def fit_bimodal(scores, model: str = "gaussian") -> BimodalFit:
    """Maximum-likelihood two-component fit and discrimination fidelity.

    Scores are standardized before fitting and the result is mapped back, so
    the fidelity is invariant under ``a s + b`` with ``a > 0``.  The
    initializer is the method-of-moments estimate of a two-means split.

    Raises:
        ValueError: fewer than 100 finite samples or unknown model.
        FitError: the optimizer did not converge.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    s = np.asarray(scores, dtype=float).ravel()
    if s.size < MIN_BIMODAL_SAMPLES or not np.all(np.isfinite(s)):
        raise ValueError(f"need at least {MIN_BIMODAL_SAMPLES} finite samples")
    mu, sd = s.mean(), s.std()
    if not sd > 1e-12 * max(abs(mu), 1.0):
        raise ValueError("scores have zero variance")
    z = (s - mu) / sd
    up = _two_means(z)
    if up.all() or (~up).all():
        up = z > np.median(z)
    w = min(max(up.mean(), 0.01), 0.99)
    lo_z, hi_z = z[~up], z[up]
    s0 = max(lo_z.std(), 1e-3) if lo_z.size > 1 else 0.1
    s1 = max(hi_z.std(), 1e-3) if hi_z.size > 1 else 0.1
    p0 = np.array([math.log(w / (1 - w)), lo_z.mean() if lo_z.size else -1.0,
                   hi_z.mean() if hi_z.size else 1.0, math.log(s0), math.log(s1)])
    # Large samples: likelihood on a fine histogram (bin = 1e-3 of the range).
    zf, wts = z, None
    if z.size > BINNED_ABOVE:
        counts, edges = np.histogram(z, bins=1000)
        keep = counts > 0
        zf, wts = (0.5 * (edges[1:] + edges[:-1]))[keep], counts[keep].astype(float)
    res = _minimize([p0], zf, False, wts)
    if model == "skew-gaussian":
        starts = [np.concatenate([res.x, a]) for a in ((0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (2.0, 2.0))]
        res = _minimize(starts, zf, True, wts)
    if not np.isfinite(res.fun):
        raise FitError("bimodal fit failed", float(res.fun))
    x = res.x
    w = 1.0 / (1.0 + math.exp(-x[0]))
    loc = np.array([x[1], x[2]])
    scale = np.exp(x[3:5])
    shape = np.array([x[5], x[6]]) if model == "skew-gaussian" else np.zeros(2)
    weights = np.array([1 - w, w])
    d = shape / np.sqrt(1 + shape ** 2)
    means = loc + scale * d * math.sqrt(2 / math.pi)
    if means[0] > means[1]:
        weights, loc, scale, shape = weights[::-1], loc[::-1], scale[::-1], shape[::-1]
    cdfs = [lambda t, k=k: stats.skewnorm.cdf(t, shape[k], loc[k], scale[k]) for k in range(2)]
    span = z.max() - z.min()
    fid, theta = discrimination_fidelity(weights, cdfs, z.min() - 0.1 * span, z.max() + 0.1 * span)
    n = s.size
    return BimodalFit(model, weights, mu + sd * loc, sd * scale, shape, float(mu + sd * theta),
                      float(fid), float(-res.fun - n * math.log(sd)))


def empirical_fidelity(scores, truth) -> tuple:
    """Best-threshold accuracy against known labels: ``(fidelity, threshold)``."""
    s = np.asarray(scores, dtype=float).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    order = np.argsort(s, kind="stable")
    s, t = s[order], t[order]
    n = s.size
    # classify s > theta as occupied; theta between s[i-1] and s[i]
    occ_below = np.concatenate([[0], np.cumsum(t)])
    empty_above = np.concatenate([[0], np.cumsum((~t)[::-1])])[::-1]
    err = occ_below + empty_above
    i = int(np.argmin(err))
    theta = s[0] - 1.0 if i == 0 else (s[-1] + 1.0 if i == n else 0.5 * (s[i - 1] + s[i]))
    return 1.0 - err[i] / n, float(theta)


# -- correlations ----------------------------------------------------------

@dataclass
class CorrelationResult:
    """Pearson matrix; rows and columns of zero-variance sites are NaN."""

    matrix: np.ndarray
    zero_variance: np.ndarray


def pearson_matrix(scores) -> CorrelationResult:
    """``rho = cov(X, Y) / (sigma_X sigma_Y)`` for every pair of sites."""
    x = np.asarray(scores, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (shots >= 2, sites) score matrix")
    xc = x - x.mean(axis=0)
    sd = np.sqrt((xc * xc).sum(axis=0))
    flat = sd <= 1e-12 * np.maximum(np.abs(x).max(axis=0), 1.0) * math.sqrt(x.shape[0])
    safe = np.where(flat, 1.0, sd)
    z = xc / safe
    r = np.clip(z.T @ z, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    r[flat, :] = np.nan
    r[:, flat] = np.nan
    return CorrelationResult(r, flat)


# -- time traces -----------------------------------------------------------

def moving_sum(counts, window_s: float = 10e-3, bin_s: float = 1e-3) -> np.ndarray:
    """Equal-weight moving sum over the last axis; output bin ``i`` covers
    input bins ``i .. i + k - 1`` with ``k = window / bin``."""
    k = int(round(window_s / bin_s))
    if k < 1:
        raise ValueError("window shorter than one bin")
    c = np.asarray(counts, dtype=float)
    if c.shape[-1] < k:
        raise ValueError("trace shorter than the window")
    cs = np.cumsum(c, axis=-1)
    cs = np.concatenate([np.zeros(c.shape[:-1] + (1,)), cs], axis=-1)
    return cs[..., k:] - cs[..., :-k]


@dataclass
class SurvivalFit:
    tau_s: float
    rate: float
    rate_stderr: float

    def survival(self, t):
        return np.exp(-self.rate * np.asarray(t, dtype=float))


def survival_fit(t, occupancy) -> SurvivalFit:
    """Least-squares ``exp(-t / tau)`` fit to survival versus time.

    ``occupancy`` is either a survival fraction per time point or a binary
    ``(traces, times)`` matrix.  Non-decaying data give ``tau = inf``.
    """
    t = np.asarray(t, dtype=float).ravel()
    y = np.asarray(occupancy, dtype=float)
    if y.ndim == 2:
        y = y.mean(axis=0)
    if t.size < 2 or y.shape != t.shape:
        raise ValueError("need >= 2 time points matching the occupancy data")
    scale = 1.0 / max(t.max() - t.min(), 1e-300)
    # SSE slope at zero rate is 2 sum t (y - 1); non-negative means no decay
    no_decay = float(t @ (y - 1.0)) >= 0.0

    def resid(k):
        return np.exp(-k[0] * scale * t) - y

    r = optimize.least_squares(resid, x0=[1.0], bounds=([0.0], [np.inf]), method="trf",
                               xtol=1e-14, ftol=1e-14, gtol=1e-14)
    k = float(r.x[0]) * scale
    dof = max(t.size - 1, 1)
    s2 = float(r.fun @ r.fun) / dof
    jac = r.jac[:, 0] * scale
    jj = float(jac @ jac)
    se = math.sqrt(s2 / jj) if jj > 0 else float("inf")
    if no_decay or k <= 0.0:
        return SurvivalFit(float("inf"), 0.0, se)
    return SurvivalFit(1.0 / k, k, se)


# -- trap waist ------------------------------------------------------------

def depth_from_light_shift(light_shift_J: float) -> float:
    """Trap depth from the total measured light shift."""
    return LIGHT_SHIFT_DEPTH_FACTOR * light_shift_J


def trap_waist(depth_J, freq_kHz, mass_kg) -> np.ndarray:
    """Harmonic waist ``w = sqrt(U / m) / (pi nu)`` in micrometres."""
    u = np.asarray(depth_J, dtype=float)
    nu = np.asarray(freq_kHz, dtype=float) * 1e3
    m = np.asarray(mass_kg, dtype=float)
    if np.any(u <= 0) or np.any(nu <= 0) or np.any(m <= 0):
        raise ValueError("depth, frequency and mass must be positive")
    w = np.sqrt(u / m) / (math.pi * nu) * 1e6
    return float(w) if w.ndim == 0 else w


def gaussian_trap_frequency(depth_J: float, waist_um: float, mass_kg: float, h_frac: float = 1e-3) -> float:
    """Radial small-oscillation frequency (kHz) of ``-U exp(-2 r^2 / w^2)``,
    from a finite-difference curvature of the potential."""
    w = waist_um * 1e-6

    def v(r):
        return -depth_J * math.exp(-2.0 * r * r / (w * w))

    h = h_frac * w
    k = (v(h) - 2.0 * v(0.0) + v(-h)) / (h * h)
    return math.sqrt(k / mass_kg) / (2.0 * math.pi) * 1e-3


# -- spectra ---------------------------------------------------------------

@dataclass
class SpectrumFit:
    fsr: float
    linewidth: float
    finesse: float
    centers: np.ndarray
    depths: np.ndarray
    unresolved: bool


N_IMAGES = 8


def _dips_model(f, baseline, width, centers, depths, periodic=False):
    """Flat baseline minus Lorentzian dips.  ``periodic`` adds the images of
    the edge dips one to ``N_IMAGES`` spacings beyond the window, whose tails
    reach into it."""
    out = np.full_like(f, baseline)
    for c, d in zip(centers, depths):
        out -= lorentzian_dip(f, c, width, d)
    if periodic:
        lo, hi = int(np.argmin(centers)), int(np.argmax(centers))
        step = (centers[hi] - centers[lo]) / (len(centers) - 1)
        for k in range(1, N_IMAGES + 1):
            out -= lorentzian_dip(f, centers[lo] - k * step, width, depths[lo])
            out -= lorentzian_dip(f, centers[hi] + k * step, width, depths[hi])
    return out


def finesse_from_spectrum(freq, refl, min_prominence: float = 0.3) -> SpectrumFit:
    """Global fit of equal-width Lorentzian dips plus a flat baseline.

    Evenly spaced dips are treated as one resonance series, so the tails of
    its members just outside the window are included in the model.

    ``F = FSR / linewidth`` with FSR the slope of dip centre against index.
    A linewidth narrower than two samples is flagged ``unresolved`` and the
    finesse reported as ``inf``.

    Raises:
        ValueError: fewer than two resolvable dips.
    """
    f = np.asarray(freq, dtype=float)
    r = np.asarray(refl, dtype=float)
    if f.shape != r.shape or f.size < 5:
        raise ValueError("frequency and reflectance must be matching 1-D arrays")
    df = float(np.median(np.diff(f)))
    inv = np.median(r) - r
    prom = min_prominence * (inv.max() - inv.min())
    peaks, props = find_peaks(inv, prominence=prom, width=0)
    if peaks.size < 2:
        raise ValueError("fewer than two resolvable dips")
    widths = props["widths"] * df
    w0 = max(float(np.median(widths)), df)
    base0 = float(np.percentile(r, 95))
    c0 = f[peaks]
    d0 = base0 - r[peaks]
    n = peaks.size
    gaps = np.diff(c0)
    periodic = bool(np.all(np.abs(gaps - np.median(gaps)) < 0.1 * np.median(gaps)))

    def resid(p):
        return _dips_model(f, p[0], p[1], p[2:2 + n], p[2 + n:], periodic) - r

    p0 = np.concatenate([[base0, w0], c0, d0])
    lo = np.concatenate([[-np.inf, 1e-3 * df], c0 - 5 * w0 - df, np.zeros(n)])
    hi = np.concatenate([[np.inf, np.inf], c0 + 5 * w0 + df, np.full(n, np.inf)])
    sol = optimize.least_squares(resid, p0, bounds=(lo, hi), x_scale="jac", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not sol.success:
        raise FitError("spectrum fit failed", float(sol.cost))
    width = float(sol.x[1])
    centers = np.sort(sol.x[2:2 + n])
    order = np.argsort(sol.x[2:2 + n])
    depths = sol.x[2 + n:][order]
    idx = np.arange(n)
    fsr = float(np.polyfit(idx, centers, 1)[0]) if n > 2 else float(centers[1] - centers[0])
    unresolved = width < 2 * df
    finesse = float("inf") if unresolved else fsr / width
    return SpectrumFit(fsr, width, finesse, centers, depths, bool(unresolved))


# -- lens scan -------------------------------------------------------------

@dataclass
class SlopeFit:
    xi_mm: float
    xi_stderr: float
    slopes: np.ndarray  # FSR per mm, >= 0
    phases: np.ndarray
    bandwidth_mm: np.ndarray  # mm per FSR, inf for zero slope
    x: np.ndarray


def fit_triangle(dz, obs, s_max=None, n_grid: int = 4001):
    """Fit ``tri(s dz + phi)`` to one cavity; returns ``(s, phi, rss)``."""
    dz = np.asarray(dz, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if dz.size < 3:
        raise ValueError("need >= 3 displacement samples per cavity")
    step = np.min(np.diff(np.unique(dz)))
    if s_max is None:
        s_max = 0.5 / step
    phis = np.linspace(0.0, 1.0, 64, endpoint=False)
    best = (0.0, 0.0, np.inf)
    for s in np.linspace(0.0, s_max, n_grid):
        u = s * dz[None, :] + phis[:, None]
        rss = ((triangle_wave(u) - obs[None, :]) ** 2).sum(axis=1)
        j = int(np.argmin(rss))
        if rss[j] < best[2]:
            best = (float(s), float(phis[j]), float(rss[j]))
    if best[2] == 0.0:
        return best

    def resid(p):
        return triangle_wave(p[0] * dz + p[1]) - obs

    sol = optimize.least_squares(resid, [best[0], best[1]], method="lm", xtol=1e-15, ftol=1e-15)
    rss = float(sol.fun @ sol.fun)
    if rss < best[2]:
        s, phi = float(sol.x[0]), float(sol.x[1])
        if s < 0:
            s, phi = -s, -phi
        return s, phi % 1.0, rss
    return best


def fit_detuning_slopes(x, dz_mm, detunings, s_max=None) -> SlopeFit:
    """Per-cavity triangle-wave slopes and ``xi`` from ``slope = x^2 / xi``.

    ``detunings`` is ``(len(x), len(dz_mm))`` in FSR units (folded).  The
    ``x = 0`` cavity is excluded from the ``xi`` fit.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    obs = np.atleast_2d(np.asarray(detunings, dtype=float))
    if obs.shape[0] != x.size:
        raise ValueError("one detuning row per cavity is required")
    fits = [fit_triangle(dz_mm, row, s_max) for row in obs]
    slopes = np.array([f[0] for f in fits])
    phases = np.array([f[1] for f in fits])
    use = x != 0
    if not use.any():
        raise ValueError("need at least one cavity with x != 0")
    x2 = x[use] ** 2
    inv_xi = float(slopes[use] @ x2 / (x2 @ x2))
    res = slopes[use] - inv_xi * x2
    dof = max(int(use.sum()) - 1, 1)
    se_inv = math.sqrt(float(res @ res) / dof / float(x2 @ x2))
    xi = 1.0 / inv_xi if inv_xi > 0 else float("inf")
    xi_se = se_inv / inv_xi ** 2 if inv_xi > 0 else float("inf")
    with np.errstate(divide="ignore"):
        bw = np.where(slopes > 0, 1.0 / np.where(slopes > 0, slopes, 1.0), np.inf)
    return SlopeFit(xi, xi_se, slopes, phases, bw, x)
