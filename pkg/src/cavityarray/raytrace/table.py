"""Flat surface table shared by the ray kernels.

Each row is one surface encounter of the unfolded trajectory, in SI units,
with refractive indices already oriented for that traversal.
"""
import functools
import math

import numpy as np

from ..prescription import CavityPrescription, SurfaceSequence, surfaces_for, unfold_round_trip

(COL_ACT, COL_Z, COL_C, COL_K, COL_A4, COL_A6, COL_A8, COL_A10, COL_N1, COL_N2,
 COL_APKIND, COL_APR, COL_PITCH, COL_NX, COL_NY, COL_CX, COL_CY, COL_LENSLET,
 COL_ELEM) = range(19)
NCOL = 19

ACT_REFRACT, ACT_REFLECT, ACT_CLIP = 0.0, 1.0, 2.0
AP_ROUND, AP_GRID = 0.0, 1.0

ST_ALIVE, ST_CLIP, ST_TIR, ST_NOCONV, ST_MISS = 0, 1, 2, 3, 4
STATUS_NAMES = {
    ST_ALIVE: "alive",
    ST_CLIP: "clipped",
    ST_TIR: "total internal reflection",
    ST_NOCONV: "intersection did not converge",
    ST_MISS: "ray misses surface",
}

_ACT = {"refract": ACT_REFRACT, "reflect": ACT_REFLECT, "clip": ACT_CLIP}


@functools.lru_cache(maxsize=64)
def build_table(p: CavityPrescription, doubled=None) -> np.ndarray:
    """Read-only surface table for one closed trajectory (doubled per prescription)."""
    return table_for_sequence(unfold_round_trip(p, doubled=doubled))


def table_for_sequence(seq: SurfaceSequence) -> np.ndarray:
    p = seq.prescription
    surfs = surfaces_for(p)
    rows = []
    for st in seq.surface_path:
        e = p.elements[st.element]
        s = surfs[st.element][st.surface]
        row = np.zeros(NCOL)
        row[COL_ACT] = _ACT[s.action]
        row[COL_Z] = s.z_mm * 1e-3
        row[COL_C] = s.curvature * 1e3
        row[COL_K] = s.conic
        coeffs = list(s.asphere) + [0.0] * (4 - len(s.asphere))
        # a_{2i} [mm^(1-2i)] -> SI
        for col, a, power in zip((COL_A4, COL_A6, COL_A8, COL_A10), coeffs, (4, 6, 8, 10)):
            row[col] = a * 1e3 ** (power - 1)
        if st.direction > 0:
            row[COL_N1], row[COL_N2] = s.n_minus, s.n_plus
        else:
            row[COL_N1], row[COL_N2] = s.n_plus, s.n_minus
        if s.action == "reflect":
            row[COL_N2] = row[COL_N1]
        row[COL_CX] = e.decenter_mm[0] * 1e-3
        row[COL_CY] = e.decenter_mm[1] * 1e-3
        if e.kind == "microlens-array":
            row[COL_APKIND] = AP_GRID
            row[COL_PITCH] = e.pitch_um * 1e-6
            row[COL_NX], row[COL_NY] = e.grid
            row[COL_LENSLET] = 1.0 if s.lenslets else 0.0
            row[COL_APR] = math.hypot(*e.grid) * 0.5 * e.pitch_um * 1e-6
        else:
            row[COL_APKIND] = AP_ROUND
            row[COL_APR] = e.aperture_mm * 1e-3
        row[COL_ELEM] = st.element
        rows.append(row)
    table = np.ascontiguousarray(np.array(rows))
    table.flags.writeable = False
    return table
