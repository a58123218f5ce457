"""Cavity geometry as data.

A cavity is described by an ordered list of optical elements along the axis
(``z``, millimetres).  The first and last element must be mirrors.  The
config format is INI-style text with one ``[cavity]`` block and one
``[element <name>]`` block per element::

    [cavity]
    wavelength_trap_nm = 785
    wavelength_probe_nm = 780
    magnification = 100
    doubled_trajectory = true

    [element flat]
    kind = flat-mirror
    position_mm = 0
    aperture_mm = 12.7
    reflectivity = 0.98

Element keys (lengths in mm unless stated otherwise):

=====================  ======================================================
key                    meaning
=====================  ======================================================
kind                   flat-mirror, curved-mirror, spherical-lens,
                       aspheric-lens, microlens-array, window, aperture
position_mm            axial position of the first vertex
aperture_mm            clear-aperture radius
thickness_mm           centre thickness (lenses, windows, MLA)
index                  refractive index of the element material
radius1_mm/radius2_mm  signed vertex radii of the two faces; positive when the
                       centre of curvature lies towards +z; ``inf`` is flat
conic1/conic2          conic constants of the two faces
asphere1/asphere2      even-asphere coefficients a4 a6 a8 a10 (mm units)
roc_mm                 mirror radius of curvature, positive when concave
                       towards the cavity interior (curved-mirror, default
                       14.3)
focal_length_mm        lenslet focal length (microlens-array)
pitch_um, grid         lenslet pitch and grid as ``NXxNY`` (microlens-array)
orientation            convex-first or convex-last (microlens-array)
decenter_mm            transverse offset ``x y`` of the element axis
reflectivity           power reflectivity (mirrors, default 1)
transmissivity         power transmissivity (default 1 for transmissive
                       elements, 0 for mirrors)
loss                   loss fraction per pass used by loss budgets (default 0)
=====================  ======================================================

The 14.3 mm default for the curved mirror is a reconstruction; it is chosen so
that the curved-mirror slope error is 330 times smaller than the mode
divergence for a 5 um displacement.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, replace
from importlib import resources

KINDS = (
    "flat-mirror",
    "curved-mirror",
    "spherical-lens",
    "aspheric-lens",
    "microlens-array",
    "window",
    "aperture",
)
MIRRORS = ("flat-mirror", "curved-mirror")
DEFAULT_ROC_MM = 14.3

# pass-count keys used in reports
KIND_LABELS = {
    "flat-mirror": "flat",
    "curved-mirror": "curved",
    "spherical-lens": "spherical",
    "aspheric-lens": "asphere",
    "microlens-array": "MLA",
    "window": "window",
    "aperture": "aperture",
}


class PrescriptionError(ValueError):
    """Raised for malformed or physically inconsistent prescriptions."""


@dataclass(frozen=True)
class OpticalElement:
    """One element of the cavity. Lengths in mm, pitch in um."""

    name: str
    kind: str
    position_mm: float
    aperture_mm: float
    thickness_mm: float = 0.0
    index: float = 1.0
    radius1_mm: float = math.inf
    radius2_mm: float = math.inf
    conic1: float = 0.0
    conic2: float = 0.0
    asphere1: tuple = ()
    asphere2: tuple = ()
    roc_mm: float = math.inf
    focal_length_mm: float = math.inf
    pitch_um: float = 0.0
    grid: tuple = (1, 1)
    orientation: str = "convex-first"
    decenter_mm: tuple = (0.0, 0.0)
    reflectivity: float = 0.0
    transmissivity: float = 1.0
    loss: float = 0.0

    @property
    def is_mirror(self) -> bool:
        return self.kind in MIRRORS

    @property
    def end_mm(self) -> float:
        return self.position_mm + self.thickness_mm

    def lenslet_radius_mm(self) -> float:
        """Vertex radius of the curved lenslet face, magnitude only."""
        return (self.index - 1.0) * self.focal_length_mm

    def translated(self, dz_mm: float) -> "OpticalElement":
        return replace(self, position_mm=self.position_mm + dz_mm)


@dataclass(frozen=True)
class CavityPrescription:
    """Ordered elements plus wavelengths and telescope magnification."""

    elements: tuple
    wavelength_trap_nm: float = 785.0
    wavelength_probe_nm: float = 780.0
    magnification: float = 100.0
    doubled_trajectory: bool = False
    atom_plane_mm: float | None = None
    name: str = "cavity"

    def __post_init__(self):
        _validate(self)

    @property
    def total_length_mm(self) -> float:
        return self.elements[-1].position_mm - self.elements[0].position_mm

    def element(self, name: str) -> OpticalElement:
        for e in self.elements:
            if e.name == name:
                return e
        raise KeyError(name)

    def index_of(self, name: str) -> int:
        for i, e in enumerate(self.elements):
            if e.name == name:
                return i
        raise KeyError(name)

    def first_of_kind(self, kind: str) -> OpticalElement:
        for e in self.elements:
            if e.kind == kind:
                return e
        raise KeyError(kind)

    def with_element(self, name: str, **changes) -> "CavityPrescription":
        """Copy with one element's fields replaced (e.g. position_mm)."""
        els = tuple(replace(e, **changes) if e.name == name else e for e in self.elements)
        return replace(self, elements=els)

    def displaced(self, name: str, dz_mm: float) -> "CavityPrescription":
        e = self.element(name)
        return self.with_element(name, position_mm=e.position_mm + dz_mm)

    def translated(self, dz_mm: float) -> "CavityPrescription":
        atom = None if self.atom_plane_mm is None else self.atom_plane_mm + dz_mm
        return replace(
            self,
            elements=tuple(e.translated(dz_mm) for e in self.elements),
            atom_plane_mm=atom,
        )

    def without(self, kind: str) -> "CavityPrescription":
        return replace(self, elements=tuple(e for e in self.elements if e.kind != kind))


def _validate(p: CavityPrescription) -> None:
    els = p.elements
    if len(els) < 2:
        raise PrescriptionError("a cavity needs at least two elements")
    if not (p.magnification > 0):
        raise PrescriptionError("magnification must be > 0")
    for w, key in ((p.wavelength_trap_nm, "wavelength_trap_nm"), (p.wavelength_probe_nm, "wavelength_probe_nm")):
        if not (w > 0 and math.isfinite(w)):
            raise PrescriptionError(f"{key} must be a positive number")
    names = set()
    for e in els:
        if e.name in names:
            raise PrescriptionError(f"duplicate element name {e.name!r}")
        names.add(e.name)
        if e.kind not in KINDS:
            raise PrescriptionError(f"element {e.name!r}: unknown kind {e.kind!r}")
        if not (e.aperture_mm > 0):
            raise PrescriptionError(f"element {e.name!r}: aperture_mm must be > 0")
        if e.thickness_mm < 0:
            raise PrescriptionError(f"element {e.name!r}: thickness_mm must be >= 0")
        for key in ("reflectivity", "transmissivity", "loss"):
            v = getattr(e, key)
            if not (0.0 <= v <= 1.0):
                raise PrescriptionError(f"element {e.name!r}: {key} must lie in [0, 1]")
        if e.reflectivity + e.transmissivity > 1.0 + 1e-15:
            raise PrescriptionError(f"element {e.name!r}: reflectivity + transmissivity exceeds 1")
        if e.kind == "microlens-array":
            if not (e.pitch_um > 0):
                raise PrescriptionError(f"element {e.name!r}: pitch_um must be > 0")
            if min(e.grid) < 1:
                raise PrescriptionError(f"element {e.name!r}: grid dimensions must be >= 1")
            if not (e.focal_length_mm > 0 and math.isfinite(e.focal_length_mm)):
                raise PrescriptionError(f"element {e.name!r}: focal_length_mm must be > 0")
            if e.orientation not in ("convex-first", "convex-last"):
                raise PrescriptionError(f"element {e.name!r}: orientation must be convex-first or convex-last")
        if e.kind in ("spherical-lens", "aspheric-lens", "window", "microlens-array"):
            if not (e.index >= 1.0):
                raise PrescriptionError(f"element {e.name!r}: index must be >= 1")
            if not (e.thickness_mm > 0):
                raise PrescriptionError(f"element {e.name!r}: thickness_mm must be > 0")
    for a, b in zip(els[:-1], els[1:]):
        if not (b.position_mm > a.end_mm):
            raise PrescriptionError(
                f"elements must be strictly ordered by position: {b.name!r} at {b.position_mm} mm "
                f"does not follow {a.name!r} ending at {a.end_mm} mm"
            )


# --------------------------------------------------------------------- parsing

_FLOAT_KEYS = (
    "position_mm", "aperture_mm", "thickness_mm", "index", "radius1_mm", "radius2_mm",
    "conic1", "conic2", "roc_mm", "focal_length_mm", "pitch_um", "reflectivity",
    "transmissivity", "loss",
)
_ELEMENT_KEYS = set(_FLOAT_KEYS) | {"kind", "asphere1", "asphere2", "grid", "orientation", "decenter_mm"}
_CAVITY_KEYS = {
    "name", "wavelength_trap_nm", "wavelength_probe_nm", "magnification",
    "doubled_trajectory", "atom_plane_mm",
}


def _float(section: str, key: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise PrescriptionError(f"[{section}] {key}: cannot parse {text!r} as a number") from None


def _floats(section, key, text) -> tuple:
    return tuple(_float(section, key, t) for t in text.replace(",", " ").split())


def load_prescription(config_text: str) -> CavityPrescription:
    """Parse config text into a validated :class:`CavityPrescription`.

    Missing optional coatings default to lossless values. Errors name the
    offending key.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(config_text)
    except configparser.Error as exc:
        raise PrescriptionError(f"config parse failure: {exc}") from None
    if not cp.has_section("cavity"):
        raise PrescriptionError("missing [cavity] section (needs wavelength_trap_nm)")
    cav = cp["cavity"]
    for key in cav:
        if key not in _CAVITY_KEYS:
            raise PrescriptionError(f"[cavity] unknown key {key!r}")
    if "wavelength_trap_nm" not in cav:
        raise PrescriptionError("[cavity] missing required key 'wavelength_trap_nm' (wavelength)")
    trap = _float("cavity", "wavelength_trap_nm", cav["wavelength_trap_nm"])
    probe = _float("cavity", "wavelength_probe_nm", cav.get("wavelength_probe_nm", repr(trap)))
    mag = _float("cavity", "magnification", cav.get("magnification", "1"))
    doubled = cav.get("doubled_trajectory", "false").strip().lower() in ("1", "true", "yes", "on")
    atom = cav.get("atom_plane_mm")
    atom = None if atom is None else _float("cavity", "atom_plane_mm", atom)

    elements = []
    for sec in cp.sections():
        if sec == "cavity":
            continue
        if not sec.startswith("element "):
            raise PrescriptionError(f"unknown section [{sec}]")
        elements.append(_parse_element(sec, cp[sec]))
    if not elements:
        raise PrescriptionError("no [element ...] sections")
    return CavityPrescription(
        elements=tuple(elements),
        wavelength_trap_nm=trap,
        wavelength_probe_nm=probe,
        magnification=mag,
        doubled_trajectory=doubled,
        atom_plane_mm=atom,
        name=cav.get("name", "cavity"),
    )


def _parse_element(sec: str, body) -> OpticalElement:
    name = sec[len("element "):].strip()
    for key in body:
        if key not in _ELEMENT_KEYS:
            raise PrescriptionError(f"[{sec}] unknown key {key!r}")
    for key in ("kind", "position_mm", "aperture_mm"):
        if key not in body:
            raise PrescriptionError(f"[{sec}] missing required key {key!r}")
    kind = body["kind"].strip()
    if kind not in KINDS:
        raise PrescriptionError(f"[{sec}] kind: unknown kind {kind!r}")
    kw = {"name": name, "kind": kind}
    for key in _FLOAT_KEYS:
        if key in body:
            kw[key] = _float(sec, key, body[key])
    for key in ("asphere1", "asphere2"):
        if key in body:
            coeffs = _floats(sec, key, body[key])
            if len(coeffs) > 4:
                raise PrescriptionError(f"[{sec}] {key}: at most 4 coefficients (a4 a6 a8 a10)")
            kw[key] = coeffs
    if "decenter_mm" in body:
        d = _floats(sec, "decenter_mm", body["decenter_mm"])
        if len(d) != 2:
            raise PrescriptionError(f"[{sec}] decenter_mm: expected two numbers")
        kw["decenter_mm"] = d
    if "grid" in body:
        try:
            nx, ny = (int(t) for t in body["grid"].lower().split("x"))
        except ValueError:
            raise PrescriptionError(f"[{sec}] grid: expected NXxNY, got {body['grid']!r}") from None
        kw["grid"] = (nx, ny)
    if "orientation" in body:
        kw["orientation"] = body["orientation"].strip()
    if kind in MIRRORS:
        kw.setdefault("reflectivity", 1.0)
        kw.setdefault("transmissivity", 1.0 - kw["reflectivity"])
        if kind == "curved-mirror":
            kw.setdefault("roc_mm", DEFAULT_ROC_MM)
    return OpticalElement(**kw)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if v == math.inf else ("-inf" if v == -math.inf else repr(v))
    return str(v)


def dump_prescription(p: CavityPrescription) -> str:
    """Canonical text form; ``load_prescription`` reproduces ``p`` exactly."""
    out = io.StringIO()
    out.write("[cavity]\n")
    out.write(f"name = {p.name}\n")
    out.write(f"wavelength_trap_nm = {_fmt(p.wavelength_trap_nm)}\n")
    out.write(f"wavelength_probe_nm = {_fmt(p.wavelength_probe_nm)}\n")
    out.write(f"magnification = {_fmt(p.magnification)}\n")
    out.write(f"doubled_trajectory = {'true' if p.doubled_trajectory else 'false'}\n")
    if p.atom_plane_mm is not None:
        out.write(f"atom_plane_mm = {_fmt(p.atom_plane_mm)}\n")
    for e in p.elements:
        out.write(f"\n[element {e.name}]\n")
        out.write(f"kind = {e.kind}\n")
        for key in _FLOAT_KEYS:
            out.write(f"{key} = {_fmt(getattr(e, key))}\n")
        for key in ("asphere1", "asphere2"):
            out.write(f"{key} = {' '.join(_fmt(float(c)) for c in getattr(e, key))}\n")
        out.write(f"grid = {e.grid[0]}x{e.grid[1]}\n")
        out.write(f"orientation = {e.orientation}\n")
        out.write(f"decenter_mm = {_fmt(float(e.decenter_mm[0]))} {_fmt(float(e.decenter_mm[1]))}\n")
    return out.getvalue()


def bundled_config_text(name: str = "paper") -> str:
    """Text of a bundled config: ``paper``, ``paper_nomla`` or ``budget_paper``."""
    return resources.files("cavityarray").joinpath("data", f"{name}.cfg").read_text()


def bundled_prescription(name: str = "paper") -> CavityPrescription:
    return load_prescription(bundled_config_text(name))


# ------------------------------------------------------------------ surfaces

@dataclass(frozen=True)
class Surface:
    """A single optical surface in millimetre units.

    ``curvature`` is signed (positive: centre of curvature towards +z).
    ``n_minus``/``n_plus`` are the indices on the -z/+z sides.
    ``action`` is ``refract``, ``reflect`` or ``clip``.
    """

    z_mm: float
    curvature: float
    conic: float
    asphere: tuple
    n_minus: float
    n_plus: float
    action: str
    lenslets: bool = False


def element_surfaces(e: OpticalElement, role: str = "interior") -> tuple:
    """Surfaces of an element in increasing z.

    ``role`` is ``near`` or ``far`` for the end mirrors; it fixes the sign of
    the mirror curvature so that ``roc_mm > 0`` is concave towards the cavity.
    """
    z = e.position_mm
    if e.kind == "flat-mirror":
        return (Surface(z, 0.0, 0.0, (), 1.0, 1.0, "reflect"),)
    if e.kind == "curved-mirror":
        c = 0.0 if not math.isfinite(e.roc_mm) else 1.0 / e.roc_mm
        if role == "far":
            c = -c
        return (Surface(z, c, e.conic1, tuple(e.asphere1), 1.0, 1.0, "reflect"),)
    if e.kind == "aperture":
        return (Surface(z, 0.0, 0.0, (), 1.0, 1.0, "clip"),)
    n = e.index
    z2 = z + e.thickness_mm
    if e.kind == "window":
        return (
            Surface(z, 0.0, 0.0, (), 1.0, n, "refract"),
            Surface(z2, 0.0, 0.0, (), n, 1.0, "refract"),
        )
    if e.kind == "microlens-array":
        r = e.lenslet_radius_mm()
        if e.orientation == "convex-first":
            return (
                Surface(z, 1.0 / r, 0.0, (), 1.0, n, "refract", lenslets=True),
                Surface(z2, 0.0, 0.0, (), n, 1.0, "refract"),
            )
        return (
            Surface(z, 0.0, 0.0, (), 1.0, n, "refract"),
            Surface(z2, -1.0 / r, 0.0, (), n, 1.0, "refract", lenslets=True),
        )
    c1 = 0.0 if not math.isfinite(e.radius1_mm) else 1.0 / e.radius1_mm
    c2 = 0.0 if not math.isfinite(e.radius2_mm) else 1.0 / e.radius2_mm
    return (
        Surface(z, c1, e.conic1, tuple(e.asphere1), 1.0, n, "refract"),
        Surface(z2, c2, e.conic2, tuple(e.asphere2), n, 1.0, "refract"),
    )


def lens_focal_length_mm(e: OpticalElement) -> float:
    """Thick-lens effective focal length (paraxial), mm."""
    if e.kind == "microlens-array":
        return e.focal_length_mm
    s = element_surfaces(e)
    if len(s) != 2:
        return math.inf
    n = e.index
    p1 = (n - 1.0) * s[0].curvature
    p2 = (1.0 - n) * s[1].curvature
    p = p1 + p2 - p1 * p2 * e.thickness_mm / n
    return math.inf if p == 0 else 1.0 / p


# ------------------------------------------------------------------ unfolding

@dataclass(frozen=True)
class SurfaceStep:
    """One surface encounter along the unfolded trajectory."""

    element: int
    surface: int
    direction: int  # +1 travelling towards +z, -1 towards -z


@dataclass(frozen=True)
class SurfaceSequence:
    """Element-level interaction list for one closed trajectory.

    ``steps`` holds ``(element index, interaction)`` with interaction in
    ``reflect``/``refract``/``clip-check``. The trajectory starts just after
    the near (first) mirror heading towards +z and ends with the reflection at
    that mirror.
    """

    prescription: CavityPrescription
    steps: tuple
    pass_counts: dict
    surface_path: tuple = field(repr=False, default=())

    def __len__(self):
        return len(self.steps)

    def element_names(self) -> list:
        return [self.prescription.elements[i].name for i, _ in self.steps]

    def is_palindromic(self) -> bool:
        """True when the element order mirrors about every far-mirror reflection."""
        idx = [i for i, _ in self.steps]
        far = len(self.prescription.elements) - 1
        near = 0
        for c, i in enumerate(idx):
            if i != far:
                continue
            j = 1
            while c - j >= 0 and c + j < len(idx) and idx[c - j] != near and idx[c + j] != near:
                if idx[c - j] != idx[c + j]:
                    return False
                j += 1
            # the legs either side must both run to the near mirror (or the start)
            left = c - j
            right = c + j
            if left >= 0 and idx[left] != near:
                return False
            if right < len(idx) and idx[right] != near:
                return False
        return True


def _action(kind: str) -> str:
    if kind in MIRRORS:
        return "reflect"
    if kind == "aperture":
        return "clip-check"
    return "refract"


def unfold_round_trip(p: CavityPrescription, doubled: bool | None = None) -> SurfaceSequence:
    """Unfold one closed trajectory near mirror -> far mirror -> near mirror.

    When ``doubled`` (default: the prescription's ``doubled_trajectory``) the
    round trip is traversed twice; an inverting array cavity needs two round
    trips to close a ray on itself.
    """
    els = p.elements
    if not (els[0].is_mirror and els[-1].is_mirror):
        raise PrescriptionError("prescription must be terminated by mirrors at both ends")
    for e in els[1:-1]:
        if e.is_mirror:
            raise PrescriptionError(f"interior mirror {e.name!r} is not supported")
    if doubled is None:
        doubled = p.doubled_trajectory
    n = len(els)
    single = [(i, _action(els[i].kind)) for i in range(1, n - 1)]
    single += [(n - 1, "reflect")]
    single += [(i, _action(els[i].kind)) for i in range(n - 2, 0, -1)]
    single += [(0, "reflect")]
    steps = single * (2 if doubled else 1)

    surfs = [element_surfaces(e, role=("near" if k == 0 else "far" if k == n - 1 else "interior"))
             for k, e in enumerate(els)]
    path = []
    direction = +1
    for i, act in steps:
        ns = len(surfs[i])
        order = range(ns) if direction > 0 else range(ns - 1, -1, -1)
        for s in order:
            path.append(SurfaceStep(i, s, direction))
        if act == "reflect":
            direction = -direction

    counts: dict = {}
    for i, _ in steps:
        label = els[i].name
        counts[label] = counts.get(label, 0) + 1
    return SurfaceSequence(prescription=p, steps=tuple(steps), pass_counts=counts, surface_path=tuple(path))


def pass_counts_by_kind(seq: SurfaceSequence) -> dict:
    """Pass counts keyed by short kind labels (MLA, spherical, ...)."""
    out: dict = {}
    for i, _ in seq.steps:
        label = KIND_LABELS[seq.prescription.elements[i].kind]
        out[label] = out.get(label, 0) + 1
    return out


def surfaces_for(p: CavityPrescription) -> list:
    """Per-element surface tuples with end-mirror roles applied."""
    n = len(p.elements)
    return [element_surfaces(e, role=("near" if k == 0 else "far" if k == n - 1 else "interior"))
            for k, e in enumerate(p.elements)]
