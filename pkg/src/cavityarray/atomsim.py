"""Synthetic data: loading statistics, doubled-port EMCCD frames, counter
traces, cavity reflectance spectra and lens-scan detunings.

Every generator is a pure function of its parameters and ``seed``.  Shots are
drawn in fixed-size chunks, each from its own ``SeedSequence`` child, so the
output never depends on how the work is scheduled.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from .budget import detuning_sensitivity

CHUNK = 1024
FRAME_MAGIC = b"CAVFRAME"
FRAME_VERSION = 1
_HEADER = struct.Struct("<8sIIII8s")  # magic, version, shots, ny, nx, dtype


def _streams(seed, n_items, chunk=CHUNK):
    """``(start, stop, Generator)`` per chunk of ``n_items``."""
    n_chunks = max(1, -(-n_items // chunk))
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(n_chunks)
    for i, ss in enumerate(children):
        a, b = i * chunk, min(n_items, (i + 1) * chunk)
        if b > a or n_items == 0:
            yield a, b, np.random.default_rng(ss)


# -- loading ---------------------------------------------------------------

@dataclass
class OccupancyState:
    """``waists[shot, cavity, k]`` is True when waist ``k`` holds an atom."""

    waists: np.ndarray
    p: float

    @property
    def occupancy(self) -> np.ndarray:
        return self.waists.sum(axis=2)

    @property
    def shots(self) -> int:
        return self.waists.shape[0]

    @property
    def n_cavities(self) -> int:
        return self.waists.shape[1]


def loading_fractions(p: float):
    """Expected ``(single, double)`` occupancy fractions, ``2p(1-p)`` and ``p^2``."""
    return 2 * p * (1 - p), p * p


def simulate_loading(p: float, n_cavities: int, shots: int, seed=0) -> OccupancyState:
    """Independent Bernoulli(``p``) loading of each of the two waists per cavity."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if n_cavities < 1 or shots < 0:
        raise ValueError("need n_cavities >= 1 and shots >= 0")
    out = np.zeros((shots, n_cavities, 2), dtype=bool)
    for a, b, rng in _streams(seed, shots):
        out[a:b] = rng.random((b - a, n_cavities, 2)) < p
    return OccupancyState(out, float(p))


# -- frames ----------------------------------------------------------------

@dataclass(frozen=True)
class FrameGeometry:
    """Two conjugate output ports per cavity, point-symmetric about ``center``.

    ``ports`` holds the first-port centres as ``(row, col)`` pixels.
    """

    shape: tuple
    ports: np.ndarray = field(compare=False)
    center: tuple

    def __post_init__(self):
        object.__setattr__(self, "ports", np.asarray(self.ports, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        allc = self.all_ports()
        if np.any(allc < 0) or np.any(allc[:, 0] > self.shape[0] - 1) or np.any(allc[:, 1] > self.shape[1] - 1):
            raise ValueError("port centres must lie inside the frame")

    @property
    def n_cavities(self) -> int:
        return self.ports.shape[0]

    @property
    def conjugate(self) -> np.ndarray:
        return 2.0 * np.asarray(self.center) - self.ports

    def all_ports(self) -> np.ndarray:
        """``(2n, 2)``: first ports, then conjugates in the same cavity order."""
        return np.vstack([self.ports, self.conjugate])

    @classmethod
    def grid(cls, n_side: int = 3, spacing: float = 8.0, gap: float = 6.0, shape=(53, 53)):
        """``n_side x n_side`` cavities; first ports above the centre row."""
        ny, nx = shape
        cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
        ports = []
        for i in range(n_side):
            for j in range(n_side):
                ports.append((cy - gap - spacing * i, cx + spacing * (j - (n_side - 1) / 2.0)))
        return cls(shape, np.array(ports), (cy, cx))


@dataclass(frozen=True)
class DetectorModel:
    """EMCCD and illumination constants.

    ``rate_hz * exposure_s`` is the mean detected photon number per occupied
    waist.  ``background`` is the mean stray photon number per pixel.  The
    defaults are tuned so that the best-threshold discrimination fidelity of
    raw 5 x 5 window sums is close to 0.992; they are not measured values.
    """

    rate_hz: float = 12000.0
    exposure_s: float = 1e-3
    em_gain: float = 300.0
    read_noise: float = 20.0
    offset: float = 500.0
    background: float = 0.004
    psf_sigma_px: float = 1.0

    @property
    def photons_per_atom(self) -> float:
        return self.rate_hz * self.exposure_s


PROTOCOLS = ("per-waist", "shared")


@dataclass
class FrameSet:
    """Frames ``(shots, ny, nx)`` with ground-truth photon numbers per port."""

    frames: np.ndarray
    photons: np.ndarray  # (shots, 2 * n_cavities)
    geometry: FrameGeometry
    detector: DetectorModel
    protocol: str


def _psf_weights(center, sigma, shape):
    """Pixel-integrated Gaussian PSF on a local window, normalized to 1."""
    r = int(math.ceil(4 * sigma))
    cy, cx = center
    ys = np.arange(max(0, int(math.floor(cy)) - r), min(shape[0], int(math.ceil(cy)) + r + 1))
    xs = np.arange(max(0, int(math.floor(cx)) - r), min(shape[1], int(math.ceil(cx)) + r + 1))
    s2 = math.sqrt(2.0) * sigma
    wy = 0.5 * (erf((ys + 0.5 - cy) / s2) - erf((ys - 0.5 - cy) / s2))
    wx = 0.5 * (erf((xs + 0.5 - cx) / s2) - erf((xs - 0.5 - cx) / s2))
    w = np.outer(wy, wx)
    idx = (ys[:, None] * shape[1] + xs[None, :]).ravel()
    return idx, (w / w.sum()).ravel()


def port_means(occ: OccupancyState, detector: DetectorModel, protocol: str = "per-waist") -> np.ndarray:
    """Mean signal photons per port, ``(shots, 2 n)`` ordered as :meth:`FrameGeometry.all_ports`.

    ``per-waist``: waist ``k`` feeds port ``k`` only.  ``shared``: the cavity
    occupancy is split evenly over both ports.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    mu = detector.photons_per_atom
    w = occ.waists.astype(float)
    if protocol == "per-waist":
        return mu * np.concatenate([w[:, :, 0], w[:, :, 1]], axis=1)
    half = 0.5 * mu * w.sum(axis=2)
    return np.concatenate([half, half], axis=1)


def expected_frame(means, geometry: FrameGeometry, detector: DetectorModel) -> np.ndarray:
    """Noise-free mean frame (ADU) for one shot of port means."""
    ny, nx = geometry.shape
    img = np.full(ny * nx, detector.background)
    for m, c in zip(means, geometry.all_ports()):
        idx, w = _psf_weights(c, detector.psf_sigma_px, geometry.shape)
        img[idx] += m * w
    return (detector.offset + detector.em_gain * img).reshape(ny, nx)


def simulate_frames(occ: OccupancyState, geometry: FrameGeometry, detector: DetectorModel = None,
                    seed=0, protocol: str = "per-waist") -> FrameSet:
    """EMCCD frames: Poisson photons, Gamma gain per photon, Gaussian read noise."""
    detector = detector or DetectorModel()
    if occ.n_cavities != geometry.n_cavities:
        raise ValueError("occupancy and geometry disagree on the cavity count")
    ny, nx = geometry.shape
    shots = occ.shots
    means = port_means(occ, detector, protocol)
    psfs = [_psf_weights(c, detector.psf_sigma_px, geometry.shape) for c in geometry.all_ports()]
    frames = np.empty((shots, ny, nx), dtype=np.uint16)
    photons = np.zeros(means.shape, dtype=np.int64)
    for a, b, rng in _streams(seed, shots):
        n = b - a
        pix = rng.poisson(detector.background, (n, ny * nx))
        k = rng.poisson(means[a:b])
        photons[a:b] = k
        for j, (idx, w) in enumerate(psfs):
            pix[:, idx] += rng.multinomial(k[:, j], w)
        electrons = rng.gamma(np.maximum(pix, 1), detector.em_gain) * (pix > 0)
        adu = electrons + detector.offset + rng.normal(0.0, detector.read_noise, electrons.shape)
        frames[a:b] = np.clip(np.rint(adu), 0, 65535).reshape(n, ny, nx)
    return FrameSet(frames, photons, geometry, detector, protocol)


def write_frames(path, frames) -> None:
    """Binary container: fixed header then C-order little-endian pixels.

    ``path`` may also be a writable binary file object.
    """
    frames = np.ascontiguousarray(frames)
    if frames.ndim != 3:
        raise ValueError("frames must be (shots, ny, nx)")
    dt = frames.dtype.newbyteorder("<")
    code = dt.str.encode("ascii")
    blob = _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, *frames.shape, code) + frames.astype(dt, copy=False).tobytes()
    if hasattr(path, "write"):
        path.write(blob)
        return
    with open(path, "wb") as fh:
        fh.write(blob)


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("truncated frame header")
        magic, version, shots, ny, nx, code = _HEADER.unpack(head)
        if magic != FRAME_MAGIC:
            raise ValueError("not a frame container")
        if version != FRAME_VERSION:
            raise ValueError(f"unsupported frame container version {version}")
        dt = np.dtype(code.rstrip(b"\0").decode("ascii"))
        data = np.frombuffer(fh.read(), dtype=dt)
    if data.size != shots * ny * nx:
        raise ValueError("frame container size mismatch")
    return data.reshape(shots, ny, nx)


def truth_rows(fs: FrameSet, occ: OccupancyState):
    """Ground-truth table rows ``(shot, cavity, waist1, waist2, photons1, photons2)``."""
    n = occ.n_cavities
    rows = []
    for s in range(occ.shots):
        for c in range(n):
            rows.append((s, c, int(occ.waists[s, c, 0]), int(occ.waists[s, c, 1]),
                         int(fs.photons[s, c]), int(fs.photons[s, n + c])))
    return rows


def detector_dict(d: DetectorModel) -> dict:
    return asdict(d)


# -- counter traces --------------------------------------------------------

@dataclass
class SpcmTrace:
    """Binned counts ``(traces, bins)``; ``loss_time`` is inf for no loss."""

    counts: np.ndarray
    bin_s: float
    bright_rate: float
    dark_rate: float
    tau_s: float
    loss_time: np.ndarray

    @property
    def times(self) -> np.ndarray:
        """Bin start times (s)."""
        return np.arange(self.counts.shape[1]) * self.bin_s


def simulate_spcm_trace(occupied, bright_rate: float, dark_rate: float, tau_s: float,
                        duration_s: float, seed=0, bin_s: float = 1e-3) -> SpcmTrace:
    """Counter traces for atoms lost after an exponential time of mean ``tau_s``.

    ``occupied`` is a boolean per trace (a scalar gives one trace).
    """
    if bright_rate < 0 or dark_rate < 0:
        raise ValueError("rates must be >= 0")
    if tau_s <= 0 or bin_s <= 0 or duration_s < bin_s:
        raise ValueError("need tau > 0 and duration >= bin > 0")
    occ = np.atleast_1d(np.asarray(occupied, dtype=bool))
    nb = int(round(duration_s / bin_s))
    counts = np.empty((occ.size, nb), dtype=np.int64)
    loss = np.full(occ.size, np.inf)
    edges = np.arange(nb) * bin_s
    for a, b, rng in _streams(seed, occ.size):
        t_loss = rng.exponential(tau_s, b - a)
        t_loss = np.where(occ[a:b], t_loss, 0.0)
        loss[a:b] = np.where(occ[a:b], t_loss, np.inf)
        bright_time = np.clip(t_loss[:, None] - edges[None, :], 0.0, bin_s)
        mean = bright_rate * bright_time + dark_rate * (bin_s - bright_time)
        counts[a:b] = rng.poisson(mean)
    loss[~occ] = np.inf
    return SpcmTrace(counts, bin_s, bright_rate, dark_rate, tau_s, loss)


# -- spectra ---------------------------------------------------------------

def lorentzian_dip(f, center, fwhm, depth):
    hw = 0.5 * fwhm
    return depth * hw * hw / ((f - center) ** 2 + hw * hw)


def simulate_spectrum(fsr: float, linewidth: float, depth=0.5, detunings=(0.0,), noise: float = 0.0,
                      seed=0, f_start=None, f_stop=None, samples: int = 4000):
    """Reflectance ``1 - sum of Lorentzian dips`` versus frequency.

    Mode ``j`` resonates at ``n fsr + detunings[j] fsr`` for every integer
    ``n`` (detunings in FSR units).  The default window spans three
    consecutive resonances.  ``noise`` is the Gaussian standard deviation.
    """
    if not 0 < linewidth < fsr:
        raise ValueError("need 0 < linewidth < fsr")
    f_start = -0.5 * fsr if f_start is None else f_start
    f_stop = 2.5 * fsr if f_stop is None else f_stop
    f = np.linspace(f_start, f_stop, samples)
    det = np.atleast_1d(np.asarray(detunings, dtype=float))
    depths = np.broadcast_to(np.asarray(depth, dtype=float), det.shape)
    refl = np.ones_like(f)
    n_lo = int(math.floor(f_start / fsr)) - 2
    n_hi = int(math.ceil(f_stop / fsr)) + 2
    for d, a in zip(det, depths):
        for n in range(n_lo, n_hi + 1):
            refl -= lorentzian_dip(f, (n + d) * fsr, linewidth, a)
    if noise > 0:
        refl = refl + np.random.default_rng(seed).normal(0.0, noise, f.shape)
    return f, refl


# -- lens scan -------------------------------------------------------------

def triangle_wave(u):
    """Distance to the nearest integer: period 1, range [0, 0.5]."""
    u = np.asarray(u, dtype=float)
    return np.abs(u - np.rint(u))


def simulate_detuning_scan(x, dz_mm, xi_mm: float, dz0_mm: float = 0.0, noise: float = 0.0, seed=0):
    """Observed detuning (FSR units, folded to [0, 0.5]) per cavity and lens step.

    Returns ``(len(x), len(dz_mm))``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dz = np.atleast_1d(np.asarray(dz_mm, dtype=float))
    d = detuning_sensitivity(x[:, None], xi_mm, dz[None, :] - dz0_mm)
    obs = triangle_wave(d)
    if noise > 0:
        obs = obs + np.random.default_rng(seed).normal(0.0, noise, obs.shape)
    return obs
