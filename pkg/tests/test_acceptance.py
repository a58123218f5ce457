"""Acceptance criteria, one PASS/FAIL line each.

Lines are printed with output capture disabled so they show up in
``pytest -v``.  A criterion that cannot be met is marked ``xfail(strict=True)``
and still prints FAIL.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from cavityarray import analysis as N
from cavityarray import atomsim as S
from cavityarray import hologram as H
from cavityarray.budget import (
    Stage, collection_chain, cooperativity, degeneracy_capacity, elementwise_loss, finesse_from_loss,
    internal_loss, loss_from_finesse, montecarlo_outcoupling, outcoupling_fraction, quarter_trip_loss,
)
from cavityarray.cli import run
from cavityarray.paraxial import analytic_waist, eigen_mode, round_trip_matrix, stability_scan, stable_width
from cavityarray.raytrace import Ray, round_trip_map, round_trips_until_clip, survival_map, trace_many

RB87 = 1.443e-25
TABLE_I = [("MLA", 0.005, 4), ("spherical", 0.0025, 4), ("window", 0.005, 4),
           ("asphere", 0.025, 4), ("curved", 0.044, 2), ("misalignment", 0.015, 4)]


def report(capsys, n, name, checks):
    """Print one line per criterion; ``checks`` is a list of ``(ok, detail)``."""
    ok = all(c for c, _ in checks)
    detail = "; ".join(f"{'ok' if c else 'MISS'}: {d}" for c, d in checks)
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:2d} {name}: {'PASS' if ok else 'FAIL'} | {detail}")
    return ok


def test_criterion_01_finesse_loss(capsys):
    rho = loss_from_finesse(13.4)
    inv = max(abs(finesse_from_loss(loss_from_finesse(f)) - f) / f for f in (5.0, 13.4, 100.0, 1000.0))
    inv2 = max(abs(loss_from_finesse(finesse_from_loss(r)) - r) for r in (0.01, 0.373, 0.9))
    assert report(capsys, 1, "finesse-loss", [
        (abs(rho - 0.373) <= 0.002, f"loss_from_finesse(13.4)={rho:.5f} (0.373+-0.002)"),
        (inv <= 1e-12 and inv2 <= 1e-12, f"round-trip error {max(inv, inv2):.1e} (<=1e-12)"),
    ])


def test_criterion_02_internal_loss(capsys):
    rho0 = internal_loss(0.373, 0.98, 2)
    assert report(capsys, 2, "internal-loss", [(abs(rho0 - 0.347) <= 0.002, f"rho0={rho0:.5f} (0.347+-0.002)")])


def test_criterion_03_elementwise_loss(capsys):
    tot = elementwise_loss(TABLE_I)
    assert report(capsys, 3, "element-wise-loss", [
        (abs(tot - 0.260) <= 1e-3, f"total={tot:.5f} (0.260, last quoted digit)"),
        (0.23 <= tot <= 0.31, "inside 27(4)%"),
    ])


@pytest.mark.xfail(strict=True, reason="Lambda(0.1, 0.098)=0.33687 by the stated formula; 0.3377 is reached "
                                       "only with the unrounded P_I=0.097643 (see README)")
def test_criterion_04_outcoupling(capsys):
    t0 = time.perf_counter()
    lit = outcoupling_fraction(0.1, 0.098)
    p_i = quarter_trip_loss(0.337)
    unr = outcoupling_fraction(0.1, p_i)
    checks = [
        (abs(lit - 0.3377) <= 1e-4, f"Lambda(0.1,0.098)={lit:.6f} (0.3377+-1e-4)"),
        (abs(unr - 0.3377) <= 1e-4, f"Lambda(0.1,P_I={p_i:.6f})={unr:.6f}"),
    ]
    for pi_ in (0.098, p_i):
        est, _ = montecarlo_outcoupling(0.1, pi_, 1_000_000, seed=2024)
        lam = outcoupling_fraction(0.1, pi_)
        z = abs(est - lam) / math.sqrt(lam * (1 - lam) / 1e6)
        checks.append((z < 3, f"MC(P_I={pi_:.6f}) {est:.6f}, {z:.2f} sigma"))
    small = outcoupling_fraction(1e-4, 1e-4) / (1e-4 / 3e-4) - 1
    checks.append((abs(small) < 1e-3, f"small-loss rel dev {small:.1e}"))
    dt = time.perf_counter() - t0
    checks.append((dt < 5, f"{dt:.2f} s"))
    assert report(capsys, 4, "outcoupling", checks)


def test_criterion_05_collection_chain(capsys):
    peak = collection_chain(0.337, 0.9, 1.01, 780)
    stages = [Stage("polarizer", 0.46), Stage("telescopes", 0.96), Stage("qe", 0.75)]
    full = collection_chain(0.337, 0.9, 1.01, 780, temperature_uK=25, axial_freq_kHz=280, mass_kg=RB87,
                            kappa_pol=0.785, stages=stages)
    direct = 0.139 * 0.46 * 0.96 * 0.75
    assert report(capsys, 5, "collection-chain", [
        (abs(peak["P_col"] - 0.181) <= 0.005, f"P_col={peak['P_col']:.4f} (0.181+-0.005)"),
        (abs(full.total - 0.046) <= 0.001, f"chain total={full.total:.4f}, cavity={full['cavity']:.4f} (0.046+-0.001)"),
        (abs(direct - 0.046) <= 0.001, f"13.9%*0.46*0.96*0.75={direct:.4f}"),
    ])


def test_criterion_06_cooperativity(capsys):
    c = cooperativity(13.4, 1.01, 780)
    assert report(capsys, 6, "cooperativity", [
        (abs(c - 1.55) <= 0.01, f"C={c:.4f} (1.55+-0.01)"),
        (abs(c - 1.6) <= 0.2, "within 1.6(2)"),
    ])


def test_criterion_07_analytic_waist(capsys, paper):
    w0, valid = analytic_waist(100, 46.7e-3, 785e-9, 14.3e-3)
    bp = eigen_mode(round_trip_matrix(paper, "atom"), 785.0)
    rel = bp.waist_um * 1e-6 / w0 - 1
    assert report(capsys, 7, "analytic-waist", [
        (abs(w0 * 1e6 - 1.08) <= 0.001 and valid, f"w0={w0 * 1e6:.5f} um (1.08+-0.001)"),
        (abs(rel) < 0.03, f"eigenmode {bp.waist_um:.5f} um, rel dev {rel:+.4f} (<3%)"),
    ])


def test_criterion_08_stability_width(capsys, paper):
    t0 = time.perf_counter()
    bp = eigen_mode(round_trip_matrix(paper, "atom"), 785.0)
    sc = stability_scan(paper, "asphere", (-0.02, 0.02), 401)
    w = sc.stable_width_mm() * 1e-3
    expect = stable_width(bp.waist_um * 1e-6, 785e-9)
    dt = time.perf_counter() - t0
    assert report(capsys, 8, "stability-width", [
        (abs(w / expect - 1) < 0.10, f"width={w * 1e6:.3f} um vs 2 pi w0^2/lambda={expect * 1e6:.3f} um"),
        (dt < 10, f"{dt:.2f} s"),
    ])


def test_criterion_09_ray_abcd(capsys, paper):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    m = round_trip_matrix(paper)
    s = np.column_stack([rng.uniform(-10e-6, 10e-6, (100, 2)), rng.uniform(-1e-4, 1e-4, (100, 2))])

    def err(states):
        out = round_trip_map(paper, states)
        px = states[:, [0, 2]] @ m.T
        py = states[:, [1, 3]] @ m.T
        return np.hypot(out[:, 0] - px[:, 0], out[:, 1] - py[:, 0])

    e1, e2 = err(s), err(s / 2)
    ratio = float(np.median(e1 / e2))
    dt = time.perf_counter() - t0
    assert report(capsys, 9, "ray-vs-abcd", [
        (e1.max() < 1e-9, f"max position error {e1.max():.2e} m (<1e-9)"),
        (abs(ratio - 8) < 0.4, f"error ratio on halving {ratio:.3f} (cubic: 8)"),
        (dt < 10, f"{dt:.2f} s"),
    ])


def test_criterion_10_survival_maps(capsys, paper, paper_nomla):
    t0 = time.perf_counter()
    k = np.arange(21) - 10
    xx, yy = np.meshgrid(k * 0.5, k * 0.5)
    r = np.hypot(xx, yy).ravel()
    c = np.column_stack([xx.ravel(), yy.ravel()]) * 1e-3
    trips, *_ = trace_many(paper, np.column_stack([c, np.zeros(len(c))]), np.tile([0, 0, 1.0], (len(c), 1)), 100)
    band = (r >= 2.0) & (r <= 3.0)
    outer = r > 3.0
    on_axis_2mm = round_trips_until_clip(Ray.launch(x=2e-3), paper)
    sm = survival_map(paper_nomla, span_mm=14.0, resolution=(64, 64))
    mx, my = np.meshgrid(sm.x_mm, sm.y_mm)
    rr = np.hypot(mx, my).ravel()
    cc = sm.counts.ravel()
    core = rr[cc < sm.cap].min()
    beyond = rr >= core
    rho, p = stats.spearmanr(rr[beyond], cc[beyond])
    edges = np.arange(0.0, 7.5, 0.5)
    idx = np.digitize(rr, edges) - 1
    med = [float(np.median(cc[idx == i])) for i in range(len(edges) - 1) if (idx == i).any()]
    dt = time.perf_counter() - t0
    assert report(capsys, 10, "survival-maps", [
        ((trips[band] == 100).all() and on_axis_2mm == 100,
         f"MLA: {int((trips[band] == 100).sum())}/{int(band.sum())} lenslet launches at 2-3 mm capped "
         f"(beyond 3 mm {int((trips[outer] == 100).sum())}/{int(outer.sum())})"),
        (rho < 0 and p < 1e-6, f"no MLA: core {core:.2f} mm, Spearman rho={rho:.3f} p={p:.1e} beyond core"),
        (True, "0.5 mm bin medians " + " ".join(f"{v:g}" for v in med)),
        (dt < 60, f"{dt:.2f} s"),
    ])


def test_criterion_11_degeneracy(capsys):
    n = degeneracy_capacity(100, 1.0, 19.0)
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    dz = np.linspace(-0.5, 0.5, 41)
    obs = S.simulate_detuning_scan(x, dz, 19.0, dz0_mm=0.05, noise=0.005, seed=11)
    fit = N.fit_detuning_slopes(x, dz, obs)
    r12 = fit.bandwidth_mm[2] / fit.bandwidth_mm[1]
    r24 = fit.bandwidth_mm[4] / fit.bandwidth_mm[2]
    assert report(capsys, 11, "degeneracy", [
        (abs(n - 597) <= 1, f"N={n:.2f} (597+-1)"),
        (abs(fit.xi_mm / 19 - 1) < 0.05, f"xi fit {fit.xi_mm:.3f} mm/FSR (19, 5%)"),
        (abs(r12 / 0.25 - 1) < 0.05 and abs(r24 / 0.25 - 1) < 0.05,
         f"bandwidth(2x)/bandwidth(x) = {r12:.4f}, {r24:.4f} (0.25)"),
    ])


def test_criterion_12_hologram(capsys):
    t0 = time.perf_counter()
    spec = H.square_array(3, 6.0)
    far = H.simulate_farfield(H.synthesize_phase_mask(spec), spec.input_intensity())
    pred = H.predicted_pixels(spec)
    dev = np.abs(H.spot_centroids(far, pred, radius=4) - pred).max()
    res = H.wgs_homogenize(H.square_array(5, 5.0), iterations=30)
    best = min(res.history)
    rng = np.random.default_rng(12)
    i0 = rng.uniform(0, 1, (256, 256))
    f2 = H.simulate_farfield(rng.uniform(-np.pi, np.pi, (256, 256)), i0, pad=2)
    pars = abs(f2.sum() / (i0.sum() * 512 ** 2) - 1)
    dt = time.perf_counter() - t0
    assert report(capsys, 12, "hologram", [
        (dev < 0.5, f"9-spot max centroid offset {dev:.3f} px (<0.5)"),
        (best < 0.02 and len(res.history) <= 30, f"WGS 5x5 spread {best:.4f} in {len(res.history)} iterations"),
        (pars < 1e-9, f"Parseval rel err {pars:.1e}"),
        (dt < 30, f"{dt:.2f} s"),
    ])


def test_criterion_13_analysis(capsys):
    checks = []
    g = S.FrameGeometry.grid()
    occ = S.simulate_loading(0.5, g.n_cavities, 4000, seed=101)
    fs = S.simulate_frames(occ, g, seed=102)
    truth = np.concatenate([occ.waists[:, :, 0], occ.waists[:, :, 1]], axis=1)
    raw = N.window_sums(fs.frames, N.windows_from_centers(g.all_ports()), 500.0)
    truth_fid = N.empirical_fidelity(raw, truth)[0]
    fit = N.fit_bimodal(raw.ravel(), "skew-gaussian")
    checks.append((abs(fit.fidelity - 0.992) <= 0.003 and abs(fit.fidelity - truth_fid) <= 0.003,
                   f"fidelity fit {fit.fidelity:.4f}, truth {truth_fid:.4f} (0.992+-0.003)"))

    n = 100_000
    o = S.simulate_loading(0.18, 1, n, seed=5).occupancy[:, 0]
    zs = [abs(np.mean(o == k) - p) / math.sqrt(p * (1 - p) / n) for k, p in zip((1, 2), S.loading_fractions(0.18))]
    checks.append((max(zs) < 3, f"loading p=0.18: single {np.mean(o == 1):.4f}, double {np.mean(o == 2):.4f} "
                                f"({max(zs):.2f} sigma max)"))

    tr = S.simulate_spcm_trace(np.ones(20_000, bool), 5000.0, 300.0, 1.0, 0.5, seed=7, bin_s=0.01)
    sf = N.survival_fit(tr.times, tr.loss_time[:, None] > tr.times[None, :])
    s4 = float(sf.survival(4e-3))
    checks.append((abs(sf.tau_s - 1) < 0.05 and round(s4, 3) == 0.996, f"tau={sf.tau_s:.4f} s, survival(4 ms)={s4:.5f}"))

    occ2 = S.simulate_loading(0.5, g.n_cavities, 2000, seed=301)
    fs2 = S.simulate_frames(occ2, g, seed=302)
    s2 = N.window_sums(fs2.frames, N.windows_from_centers(g.all_ports()), 500.0)
    r = N.pearson_matrix(s2[:, :9] + s2[:, 9:]).matrix
    off = np.abs(r[~np.eye(9, dtype=bool)]).max()
    checks.append((off < 3 / math.sqrt(2000), f"max off-diagonal |Pearson| {off:.4f} (3/sqrt(2000)={3 / math.sqrt(2000):.4f})"))

    worst = 0.0
    for seed in range(5):
        f, refl = S.simulate_spectrum(1.0, 1 / 13.4, depth=0.5, noise=0.01, seed=seed)
        worst = max(worst, abs(N.finesse_from_spectrum(f, refl).finesse / 13.4 - 1))
    checks.append((worst < 0.05, f"finesse under 2% noise: worst rel err {worst:.4f} over 5 seeds"))
    assert report(capsys, 13, "analysis-round-trips", checks)


def test_criterion_14_determinism(capsys, tmp_path):
    commands = [
        ["simulate", "--shots", "300", "--seed", "14"],
        ["scan-map", "--grid", "16x16", "--span", "10mm"],
        ["trace", "--x-mm", "0.5", "--cap", "20"],
        ["stability", "--steps", "51"],
        ["budget"],
        ["degeneracy"],
        ["hologram", "--array", "3", "--grid", "128", "--slm-pitch-um", "32", "--iterations", "5"],
    ]
    checks = []
    for argv in commands:
        outs = []
        for rep in ("a", "b"):
            d = tmp_path / argv[0] / rep
            assert run(argv + ["--out", str(d)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        checks.append((outs[0] == outs[1], f"{argv[0]} {len(outs[0])} files"))
    sim = tmp_path / "simulate" / "a"
    outs = []
    for rep in ("a", "b"):
        d = tmp_path / "analyze" / rep
        assert run(["analyze", "--frames", str(sim / "frames.bin"), "--sites", str(sim / "sites.csv"),
                    "--model", "gaussian", "--out", str(d)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    checks.append((outs[0] == outs[1], f"analyze {len(outs[0])} files"))
    m = json.loads((sim / "simulate.manifest.json").read_text())
    checks.append((m["seed"] == 14, "seed recorded in manifest"))
    assert report(capsys, 14, "determinism", checks)
