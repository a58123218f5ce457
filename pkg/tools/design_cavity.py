"""Solve the spacings of the bundled cavity prescriptions and write the configs.

Conditions for the array cavity (paraxial, thick elements):

* the spherical lens + window + asphere telescope is afocal;
* the MLA's telescope-side principal plane is imaged onto the centre of
  curvature of the end mirror (the atom plane);
* the flat mirror sits where the MLA + flat-mirror section has zero trace,
  i.e. the half-confocal spacing f_MLA / 2.

The MLA-free comparison keeps the telescope and end mirror, drops the MLA and
puts the flat mirror a small distance ``u`` in front of the self-imaged plane,
giving an equivalent flat/curved cavity with mirror radius R M^2.

Run from the repository root:  python tools/design_cavity.py
"""
import math
import os
import sys

import numpy as np
from scipy.optimize import brentq

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cavityarray.paraxial import propagation, refraction, mirror  # noqa: E402

LAM_NM = 785.0
M_TEL = 100.0
F_MLA = 46.7
F_ASPH = 1.5
F_SPH = M_TEL * F_ASPH
ROC = 14.3

N_FS = 1.4537   # fused silica near 785 nm
N_BK7 = 1.5108  # N-BK7 near 785 nm
N_ASPH = 1.5800  # moulded asphere glass

T_MLA = 1.0
T_SPH = 4.0
T_WIN = 3.0
T_ASPH = 1.0
WIN_GAP = 30.0
ASPH_APERTURE = 1.0  # window rear face to asphere

R_MLA = (N_FS - 1.0) * F_MLA
R_SPH = (N_BK7 - 1.0) * F_SPH

# Objective shape: front vertex curvature (1/mm), conics, even-asphere terms
# and thickness.  The back curvature follows from the thick-lens focal length
# F_ASPH.  Default: plano-hyperbolic singlet, free of on-axis spherical
# aberration.
ASPH_SHAPE = dict(c1=0.0, k1=0.0, k2=-N_ASPH ** 2, a1=(), a2=(), t=T_ASPH)


def asphere_back_curvature(c1, t=T_ASPH, f=F_ASPH, n=N_ASPH):
    """Back-face curvature giving thick-lens focal length ``f``."""
    phi = 1.0 / f
    return ((n - 1.0) * c1 - phi) / ((n - 1.0) * (1.0 - (n - 1.0) * t * c1 / n))


def surf_list(z_mla, z_sph, z_win, z_asph, shape=None):
    """(z_mm, curvature 1/mm, n_minus, n_plus) in increasing z, MLA onward."""
    shape = shape or ASPH_SHAPE
    c1, ta = shape["c1"], shape["t"]
    c2 = asphere_back_curvature(c1, ta)
    return [
        (z_mla, 0.0, 1.0, N_FS),
        (z_mla + T_MLA, -1.0 / R_MLA, N_FS, 1.0),
        (z_sph, 1.0 / R_SPH, 1.0, N_BK7),
        (z_sph + T_SPH, 0.0, N_BK7, 1.0),
        (z_win, 0.0, 1.0, N_FS),
        (z_win + T_WIN, 0.0, N_FS, 1.0),
        (z_asph, c1, 1.0, N_ASPH),
        (z_asph + ta, c2, N_ASPH, 1.0),
    ]


def compose(surfs, z_from, z_to):
    """Forward (+z) matrix from z_from to z_to over surfaces in between (mm -> m)."""
    m = np.eye(2)
    z = z_from
    for zs, c, nm, npl in surfs:
        if z_from < zs < z_to:
            m = propagation((zs - z) * 1e-3) @ m
            m = refraction(c * 1e3, nm, npl) @ m
            z = zs
    return propagation((z_to - z) * 1e-3) @ m


def compose_back(surfs, z_from, z_to):
    """Backward (-z) matrix from z_from down to z_to."""
    m = np.eye(2)
    z = z_from
    for zs, c, nm, npl in reversed(surfs):
        if z_to < zs < z_from:
            m = propagation((z - zs) * 1e-3) @ m
            m = refraction(-c * 1e3, npl, nm) @ m
            z = zs
    return propagation((z - z_to) * 1e-3) @ m


def solve_array(shape=None):
    z_mla = 20.0  # provisional, fixed below
    z_ref = z_mla + T_MLA  # curved lenslet vertex = rear principal plane
    z_sph = z_ref + F_SPH

    def afocal(d_sa):
        z_asph = z_sph + T_SPH + d_sa
        z_win = z_asph - WIN_GAP - T_WIN
        s = surf_list(z_mla, z_sph, z_win, z_asph, shape)
        return compose(s, z_sph - 1e-9, z_asph + (shape or ASPH_SHAPE)['t'] + 1e-9)[1, 0]

    d_sa = brentq(afocal, F_SPH * 0.9, F_SPH * 1.2, xtol=1e-14)
    z_asph = z_sph + T_SPH + d_sa
    z_win = z_asph - WIN_GAP - T_WIN
    s = surf_list(z_mla, z_sph, z_win, z_asph, shape)

    # mirror reflection for +z travel uses curvature c = -1/ROC (centre at -z)
    def image_b_explicit(z_mirror):
        fwd = compose(s, z_ref, z_mirror)
        back = compose_back(s, z_mirror, z_ref)
        t = back @ mirror(-1e3 / ROC) @ fwd
        return t[0, 1]

    z_end = z_asph + (shape or ASPH_SHAPE)['t']
    z_mirror = brentq(image_b_explicit, z_end + ROC + 0.01, z_end + ROC + 3.0, xtol=1e-14)

    def e_trace(gap):
        # flat mirror at z_mla - gap; E from z_ref back to flat and out again
        zr = z_ref + 1e-9  # just past the lenslet face so its power is included
        back = compose_back(s, zr, z_mla - gap)
        fwd = compose(s, z_mla - gap, zr)
        return np.trace(fwd @ back)

    gap = brentq(e_trace, 10.0, 40.0, xtol=1e-14)
    shift = gap - z_mla  # move everything so the flat mirror is at z = 0
    z_flat = 0.0
    pos = dict(
        mla=z_mla + shift,
        sph=z_sph + shift,
        win=z_win + shift,
        asph=z_asph + shift,
        mirror=z_mirror + shift,
    )
    pos["atom"] = pos["mirror"] - ROC
    t = compose_back(s, z_mirror, z_ref) @ mirror(-1e3 / ROC) @ compose(s, z_ref, z_mirror)
    return z_flat, pos, t


def self_imaged_plane_nomla(pos, shape=None):
    """Plane in front of the spherical lens imaged onto itself (no MLA)."""
    s = surf_list(-1e9, pos["sph"], pos["win"], pos["asph"], shape)[2:]

    def b(z):
        fwd = compose(s, z, pos["mirror"])
        back = compose_back(s, pos["mirror"], z)
        return (back @ mirror(-1e3 / ROC) @ fwd)[0, 1]

    return brentq(b, pos["sph"] - 200.0, pos["sph"] - 50.0, xtol=1e-14)


HEADER = """\
# {title}
# Reconstructed prescription: element spacings solved paraxially by
# tools/design_cavity.py (afocal spherical-lens/asphere telescope, M = 100,
# MLA imaged onto the end-mirror centre of curvature, half-confocal flat
# mirror spacing).  Glass indices are catalogue values near 785 nm; the
# asphere is a plano-hyperbolic singlet (conic = -n^2) and the end-mirror
# radius 14.3 mm is a reconstruction.  Per-pass losses follow the measured
# element-wise loss table.
"""


def element_blocks(pos, with_mla=True, flat_z=0.0, mla_grid=21, shape=None):
    shape = shape or ASPH_SHAPE
    c1 = shape["c1"]
    r1 = 1.0 / c1 if c1 else math.inf
    r2 = 1.0 / asphere_back_curvature(c1, shape["t"])
    asph = "".join(
        f"asphere{i} = " + " ".join(repr(float(a)) for a in shape[key]) + "\n"
        for i, key in ((1, "a1"), (2, "a2")) if len(shape[key])
    )
    out = []
    out.append(f"""
[element flat]
kind = flat-mirror
position_mm = {flat_z!r}
aperture_mm = 12.7
reflectivity = 0.98
transmissivity = 0.02
""")
    if with_mla:
        out.append(f"""
[element mla]
kind = microlens-array
position_mm = {pos['mla']!r}
aperture_mm = {mla_grid * 0.5 / math.sqrt(2):.4f}
thickness_mm = {T_MLA!r}
index = {N_FS!r}
focal_length_mm = {F_MLA!r}
pitch_um = 500.0
grid = {mla_grid}x{mla_grid}
orientation = convex-last
loss = 0.005
""")
    out.append(f"""
[element spherical]
kind = spherical-lens
position_mm = {pos['sph']!r}
aperture_mm = 12.7
thickness_mm = {T_SPH!r}
index = {N_BK7!r}
radius1_mm = {R_SPH!r}
radius2_mm = inf
loss = 0.0025

[element window]
kind = window
position_mm = {pos['win']!r}
aperture_mm = 12.7
thickness_mm = {T_WIN!r}
index = {N_FS!r}
loss = 0.005

[element asphere]
kind = aspheric-lens
position_mm = {pos['asph']!r}
aperture_mm = {ASPH_APERTURE!r}
thickness_mm = {float(shape['t'])!r}
index = {N_ASPH!r}
radius1_mm = {r1!r}
radius2_mm = {r2!r}
conic1 = {float(shape['k1'])!r}
conic2 = {float(shape['k2'])!r}
{asph}loss = 0.025

[element curved]
kind = curved-mirror
position_mm = {pos['mirror']!r}
aperture_mm = 6.35
roc_mm = {ROC!r}
reflectivity = 0.956
transmissivity = 0.0
loss = 0.044
""")
    return "".join(out)


def main():
    z_flat, pos, t = solve_array()
    print("array cavity positions (mm):", pos)
    print("telescope+mirror matrix at MLA rear plane:\n", t)
    data = os.path.join(os.path.dirname(__file__), "..", "src", "cavityarray", "data")
    with open(os.path.join(data, "paper.cfg"), "w") as fh:
        fh.write(HEADER.format(title="Cavity-array microscope, 21x21 MLA (lenslet centred on axis)"))
        fh.write(f"""
[cavity]
name = paper
wavelength_trap_nm = {LAM_NM!r}
wavelength_probe_nm = 780.0
magnification = {M_TEL!r}
doubled_trajectory = true
atom_plane_mm = {pos['atom']!r}
""")
        fh.write(element_blocks(pos))

    z_img = self_imaged_plane_nomla(pos)
    # equivalent flat/curved cavity: R_eq = ROC M^2; choose the flat-mirror
    # waist equal to the MLA-plane waist of the array cavity
    lam = LAM_NM * 1e-6
    w_mla = math.sqrt(lam * F_MLA / math.pi)
    r_eq = ROC * M_TEL ** 2
    zr = math.pi * w_mla ** 2 / lam
    u = zr ** 2 / r_eq  # small-u limit of w^2 = (lam/pi) sqrt(u (R_eq - u))
    # the flat sits u closer to the end mirror: L = R_eq - u, inside the stable range
    flat_z = z_img + u
    print("no-MLA self-imaged plane", z_img, "flat offset u (mm)", u)
    shift = -flat_z
    pos2 = {k: v + shift for k, v in pos.items()}
    with open(os.path.join(data, "paper_nomla.cfg"), "w") as fh:
        fh.write(HEADER.format(title="MLA-free comparison cavity (same telescope and end mirror)"))
        fh.write("""#
# The MLA is removed and the flat mirror is re-spaced a distance u from the
# plane the telescope and end mirror image onto itself, towards the end
# mirror.  This restores a stable central mode of comparable size (an
# equivalent flat/curved cavity with mirror radius ROC * M^2).
""")
        fh.write(f"""
[cavity]
name = paper_nomla
wavelength_trap_nm = {LAM_NM!r}
wavelength_probe_nm = 780.0
magnification = {M_TEL!r}
doubled_trajectory = false
atom_plane_mm = {pos2['atom']!r}
""")
        fh.write(element_blocks(pos2, with_mla=False, flat_z=0.0))


if __name__ == "__main__":
    main()
