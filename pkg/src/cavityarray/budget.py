"""Photon bookkeeping for the cavity array.

Finesse and loss conversions, element-wise loss composition, the outcoupling
fraction Λ of a photon that starts a quarter round trip away from the
outcoupler, cooperativity, a thermal axial-averaging factor, the staged
collection chain and the degeneracy-capacity scaling.

Conventions: fractions are plain floats in [0, 1]; waists in µm, wavelengths
in nm, temperatures in µK, trap frequencies in kHz, ξ in mm per free spectral
range, positioning accuracy z₀ in µm.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

KB = 1.380649e-23  # J/K
RB87_MASS_KG = 1.443160648e-25
DEFAULT_KAPPA_POL = 0.785
THERMAL_ORDERS = ("cooperativity", "collection")


class BudgetError(ValueError):
    """Inputs outside the physical range of a formula."""


def _fraction(name, v, lo_open=False, hi_open=False):
    v = float(v)
    bad = (v < 0.0 or v > 1.0 or (lo_open and v == 0.0) or (hi_open and v == 1.0)
           or not math.isfinite(v))
    if bad:
        lo = "(" if lo_open else "["
        hi = ")" if hi_open else "]"
        raise BudgetError(f"{name}={v!r} outside {lo}0, 1{hi}")
    return v


# -- finesse and loss -------------------------------------------------------

def finesse_from_loss(rho: float) -> float:
    """Finesse of a cavity with total round-trip power loss ``rho``."""
    rho = float(rho)
    if not 0.0 < rho < 1.0:
        raise BudgetError(f"rho={rho!r} outside (0, 1)")
    g = (1.0 - rho) ** 0.25
    x = (1.0 - g * g) / (2.0 * g)
    return math.pi / (2.0 * math.asin(x))


def loss_from_finesse(finesse: float) -> float:
    """Inverse of :func:`finesse_from_loss`.

    With ``g = (1-rho)^(1/4)`` and ``x = sin(pi / 2F)`` the relation is the
    quadratic ``g^2 + 2 x g - 1 = 0``.
    """
    finesse = float(finesse)
    if not finesse > 1.0:
        raise BudgetError(f"finesse={finesse!r} must exceed 1")
    x = math.sin(math.pi / (2.0 * finesse))
    g = math.sqrt(x * x + 1.0) - x
    return 1.0 - g ** 4


def internal_loss(rho: float, r_out: float, passes: int = 2) -> float:
    """Round-trip loss with the intentional outcoupler transmission removed."""
    rho = _fraction("rho", rho, hi_open=True)
    r_out = _fraction("r_out", r_out, lo_open=True)
    rho0 = 1.0 - (1.0 - rho) / r_out ** passes
    if not 0.0 <= rho0 < 1.0:
        raise BudgetError(
            f"inconsistent inputs: rho={rho} with r_out={r_out}^{passes} gives internal loss {rho0}"
        )
    return rho0


def total_loss(rho0: float, r_out: float, passes: int = 2) -> float:
    """Inverse of :func:`internal_loss`: ``1 - (1 - rho0) r_out^passes``."""
    rho0 = _fraction("rho0", rho0, hi_open=True)
    r_out = _fraction("r_out", r_out, lo_open=True)
    return 1.0 - (1.0 - rho0) * r_out ** passes


@dataclass(frozen=True)
class LossItem:
    name: str
    loss: float
    passes: int

    def __post_init__(self):
        _fraction(f"{self.name} loss", self.loss, hi_open=True)
        if int(self.passes) != self.passes or self.passes < 0:
            raise BudgetError(f"{self.name}: passes must be a non-negative integer")


def elementwise_loss(items) -> float:
    """``1 - prod (1 - l_i)^p_i`` over ``LossItem`` or ``(name, l, p)`` items."""
    total = 1.0
    for it in items:
        if not isinstance(it, LossItem):
            it = LossItem(*it)
        total *= (1.0 - it.loss) ** it.passes
    return 1.0 - total


def quarter_trip_loss(rho0: float) -> float:
    """Loss probability for one quarter round trip, ``1 - (1 - rho0)^(1/4)``."""
    rho0 = _fraction("rho0", rho0, hi_open=True)
    return 1.0 - (1.0 - rho0) ** 0.25


def outcoupling_fraction(p_m: float, p_i: float) -> float:
    """Probability Λ that the photon leaves through the outcoupler.

    The photon sees ``I M I I M I I M ...``: a quarter trip to the outcoupler,
    then two quarter trips between successive outcoupler encounters.
    """
    p_m = _fraction("P_M", p_m)
    p_i = _fraction("P_I", p_i, hi_open=True)
    if p_m == 0.0 and p_i == 0.0:
        raise BudgetError("P_M and P_I both zero: the photon never leaves")
    s = 1.0 - p_i
    return p_m * s / (1.0 - (1.0 - p_m) * s * s)


def montecarlo_outcoupling(p_m: float, p_i: float, trials: int, seed: int = 0,
                           streams: int = 8, chunk: int = 1 << 16):
    """Event-by-event simulation of the outcoupling sequence.

    Each photon is followed through ``I0 M1 I1 I2 M2 ...`` until it is lost
    internally or leaves at an ``M`` event.  ``trials`` are split over
    ``streams`` independent seeded generators and combined in stream order,
    so the estimate depends only on ``(trials, seed, streams)``.

    Returns ``(estimate, stderr)``.
    """
    p_m = _fraction("P_M", p_m)
    p_i = _fraction("P_I", p_i, hi_open=True)
    trials = int(trials)
    if trials < 1:
        raise BudgetError("trials must be >= 1")
    if p_m == 0.0 and p_i == 0.0:
        raise BudgetError("P_M and P_I both zero: the photon never leaves")
    streams = max(1, min(int(streams), trials))
    sizes = [trials // streams + (1 if k < trials % streams else 0) for k in range(streams)]
    children = np.random.SeedSequence(seed).spawn(streams)
    exits = 0
    for n, ss in zip(sizes, children):
        rng = np.random.default_rng(ss)
        left = n
        while left:
            m = min(left, chunk)
            exits += _simulate_photons(rng, m, p_m, p_i)
            left -= m
    est = exits / trials
    return est, math.sqrt(max(est * (1.0 - est), 0.0) / trials)


def _simulate_photons(rng, n, p_m, p_i):
    alive = n
    exited = 0
    # I0
    alive -= int(np.count_nonzero(rng.random(alive) < p_i))
    while alive:
        out = int(np.count_nonzero(rng.random(alive) < p_m))
        exited += out
        alive -= out
        for _ in range(2):
            if not alive:
                break
            alive -= int(np.count_nonzero(rng.random(alive) < p_i))
    return exited


# -- cooperativity and collection -----------------------------------------

def cooperativity(finesse: float, waist_um: float, wavelength_nm: float) -> float:
    """Single-atom cooperativity ``(6F/pi^3) (lambda/w)^2``."""
    if finesse <= 0 or waist_um <= 0 or wavelength_nm <= 0:
        raise BudgetError("finesse, waist and wavelength must be positive")
    return 6.0 * finesse / math.pi ** 3 * (wavelength_nm * 1e-3 / waist_um) ** 2


def thermal_axial_factor(temperature_uK: float, axial_freq_kHz: float,
                         wavelength_nm: float = 780.0, mass_kg: float = RB87_MASS_KG) -> float:
    """Standing-wave contrast averaged over a thermal axial position spread.

    ``(1 + exp(-2 k^2 sigma^2)) / 2`` with ``sigma^2 = kB T / (m w_z^2)``.
    """
    if temperature_uK < 0:
        raise BudgetError("temperature must be >= 0")
    if axial_freq_kHz <= 0:
        raise BudgetError("axial trap frequency must be > 0")
    k = 2.0 * math.pi / (wavelength_nm * 1e-9)
    omega = 2.0 * math.pi * axial_freq_kHz * 1e3
    sigma2 = KB * temperature_uK * 1e-6 / (mass_kg * omega * omega)
    return 0.5 * (1.0 + math.exp(-2.0 * k * k * sigma2))


@dataclass
class ChainResult:
    """Every intermediate of :func:`collection_chain`, in evaluation order."""

    values: dict
    formulas: dict
    stages: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.values["total"]

    def __getitem__(self, key):
        return self.values[key]


def collection_chain(rho0: float, r_out: float, waist_um: float, wavelength_nm: float,
                     passes: int = 2, temperature_uK: float | None = None,
                     axial_freq_kHz: float | None = None, mass_kg: float = RB87_MASS_KG,
                     kappa_pol: float = 1.0, stages=(), thermal_order: str = "cooperativity"):
    """Atom-to-detector efficiency with every intermediate.

    ``thermal_order='cooperativity'`` scales C by the thermal factor before the
    branching ratio; ``'collection'`` multiplies the collected fraction
    instead.  κ_pol is applied after branching in both orders.
    """
    if thermal_order not in THERMAL_ORDERS:
        raise BudgetError(f"thermal_order must be one of {THERMAL_ORDERS}")
    kappa_pol = _fraction("kappa_pol", kappa_pol, lo_open=True)
    v, f = {}, {}

    def put(key, value, formula):
        v[key] = float(value)
        f[key] = formula

    put("rho0", _fraction("rho0", rho0, hi_open=True), "input")
    put("r_out", _fraction("r_out", r_out, lo_open=True), "input")
    put("rho", total_loss(rho0, r_out, passes), "total_loss: 1-(1-rho0)*r_out^passes")
    put("finesse", finesse_from_loss(v["rho"]), "finesse_from_loss")
    put("cooperativity", cooperativity(v["finesse"], waist_um, wavelength_nm),
        "cooperativity: 6F/pi^3*(lambda/w)^2")
    if temperature_uK is not None and axial_freq_kHz is not None:
        therm = thermal_axial_factor(temperature_uK, axial_freq_kHz, wavelength_nm, mass_kg)
    else:
        therm = 1.0
    put("thermal_factor", therm, "thermal_axial_factor: (1+exp(-2k^2 sigma^2))/2")
    put("P_M", 1.0 - v["r_out"], "1-r_out")
    put("P_I", quarter_trip_loss(v["rho0"]), "quarter_trip_loss: 1-(1-rho0)^(1/4)")
    put("Lambda", outcoupling_fraction(v["P_M"], v["P_I"]),
        "outcoupling_fraction: P_M(1-P_I)/(1-(1-P_M)(1-P_I)^2)")
    c = v["cooperativity"]
    put("branching", c / (1.0 + c), "C/(1+C)")
    put("P_col", v["branching"] * v["Lambda"], "peak collection: C/(1+C) x Lambda")
    if thermal_order == "cooperativity":
        c_eff = c * therm
        put("cooperativity_thermal", c_eff, "C x thermal_factor")
        put("P_col_thermal", c_eff / (1.0 + c_eff) * v["Lambda"], "C'/(1+C') x Lambda")
    else:
        put("P_col_thermal", v["P_col"] * therm, "P_col x thermal_factor")
    cavity = v["P_col_thermal"] * kappa_pol
    put("kappa_pol", kappa_pol, "input")
    put("cavity", cavity, "P_col_thermal x kappa_pol")
    total = cavity
    stage_rows = []
    for item in stages:
        name, eff = (item.name, item.efficiency) if isinstance(item, Stage) else item
        eff = _fraction(f"stage {name}", eff, lo_open=True)
        total *= eff
        stage_rows.append((name, eff, total))
    put("total", total, "cavity x prod(stage efficiencies)")
    return ChainResult(v, f, stage_rows)


@dataclass(frozen=True)
class Stage:
    name: str
    efficiency: float


# -- degeneracy -------------------------------------------------------------

def degeneracy_capacity(finesse: float, z0_um: float, xi_mm: float) -> float:
    """Number of simultaneously degenerate cavities in a circular array.

    ``N = pi xi / (F z0)``.
    """
    if finesse <= 0 or z0_um <= 0 or xi_mm <= 0:
        raise BudgetError("finesse, z0 and xi must be positive")
    return math.pi * (xi_mm * 1e-3) / (finesse * z0_um * 1e-6)


def detuning_sensitivity(x, xi_mm: float, dz_mm):
    """Detuning (FSR units) of cavity index ``x`` for lens displacement ``dz``."""
    if xi_mm <= 0:
        raise BudgetError("xi must be positive")
    x = np.asarray(x, dtype=float)
    out = x * x * np.asarray(dz_mm, dtype=float) / xi_mm
    return float(out) if out.ndim == 0 else out


# -- budget config --------------------------------------------------------

@dataclass
class LossBudget:
    """Per-element losses plus the outcoupler; derived quantities as properties."""

    items: list
    r_out: float = 1.0
    outcoupler_passes: int = 2

    @property
    def internal(self) -> float:
        return elementwise_loss(self.items)

    @property
    def rho(self) -> float:
        return total_loss(self.internal, self.r_out, self.outcoupler_passes)

    @property
    def quarter_trip(self) -> float:
        return quarter_trip_loss(self.internal)

    @property
    def finesse(self) -> float:
        return finesse_from_loss(self.rho)


@dataclass
class BudgetConfig:
    """Parsed budget config (see ``data/budget_paper.cfg``)."""

    budget: LossBudget
    measured_finesse: float | None
    measured_r_out: float
    chain: dict
    stages: list


def load_budget_config(text: str) -> BudgetConfig:
    """Parse an INI budget config.

    Sections: ``[loss]`` (outcoupler_reflectivity, outcoupler_passes,
    measured_finesse), ``[item <name>]`` (loss, passes), ``[chain]``
    (internal_loss, outcoupler_reflectivity, waist_um, wavelength_nm,
    temperature_uK, axial_frequency_kHz, mass_kg, kappa_pol, thermal_order)
    and ``[stage <name>]`` (efficiency).
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise BudgetError(f"budget config parse error: {exc}") from exc

    def num(sec, key, default=None):
        if cp.has_option(sec, key):
            try:
                return float(cp.get(sec, key))
            except ValueError as exc:
                raise BudgetError(f"[{sec}] {key}: not a number") from exc
        if default is None:
            raise BudgetError(f"[{sec}] missing required key {key!r}")
        return default

    items, stages = [], []
    for sec in cp.sections():
        if sec.startswith("item "):
            items.append(LossItem(sec[5:].strip(), num(sec, "loss"), int(num(sec, "passes"))))
        elif sec.startswith("stage "):
            stages.append(Stage(sec[6:].strip(), _fraction(sec, num(sec, "efficiency"), lo_open=True)))
    r_out = num("loss", "outcoupler_reflectivity", 1.0) if cp.has_section("loss") else 1.0
    passes = int(num("loss", "outcoupler_passes", 2)) if cp.has_section("loss") else 2
    meas = None
    if cp.has_section("loss") and cp.has_option("loss", "measured_finesse"):
        meas = num("loss", "measured_finesse")
    chain = {}
    if cp.has_section("chain"):
        sec = "chain"
        chain = dict(
            rho0=num(sec, "internal_loss"),
            r_out=num(sec, "outcoupler_reflectivity"),
            waist_um=num(sec, "waist_um"),
            wavelength_nm=num(sec, "wavelength_nm", 780.0),
            passes=int(num(sec, "outcoupler_passes", 2)),
            kappa_pol=num(sec, "kappa_pol", 1.0),
            thermal_order=cp.get(sec, "thermal_order", fallback="cooperativity").strip(),
        )
        if cp.has_option(sec, "temperature_uK"):
            chain["temperature_uK"] = num(sec, "temperature_uK")
            chain["axial_freq_kHz"] = num(sec, "axial_frequency_kHz")
            chain["mass_kg"] = num(sec, "mass_kg", RB87_MASS_KG)
    return BudgetConfig(LossBudget(items, r_out, passes), meas, r_out, chain, stages)


def bundled_budget_text(name: str = "budget_paper") -> str:
    return resources.files("cavityarray").joinpath("data", f"{name}.cfg").read_text()


def budget_report(cfg: BudgetConfig) -> dict:
    """Machine-readable report: ``{key: {"value": v, "formula": name}}``."""
    rep = {}

    def put(key, value, formula):
        rep[key] = {"value": float(value), "formula": formula}

    b = cfg.budget
    if b.items:
        put("elementwise_internal_loss", b.internal, "elementwise_loss: 1-prod(1-l_i)^p_i")
        for it in b.items:
            put(f"item.{it.name}", it.loss, f"input, passes={it.passes}")
    if cfg.measured_finesse is not None:
        rho = loss_from_finesse(cfg.measured_finesse)
        put("measured_finesse", cfg.measured_finesse, "input")
        put("measured_total_loss", rho, "loss_from_finesse")
        put("measured_internal_loss", internal_loss(rho, cfg.measured_r_out, b.outcoupler_passes),
            "internal_loss: 1-(1-rho)/r_out^passes")
    if cfg.chain:
        res = collection_chain(stages=cfg.stages, **cfg.chain)
        for k, val in res.values.items():
            put(f"chain.{k}", val, res.formulas[k])
        for name, eff, running in res.stages:
            put(f"stage.{name}", eff, "input")
            put(f"stage.{name}.cumulative", running, "running product")
    return rep
