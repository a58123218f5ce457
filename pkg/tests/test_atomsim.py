import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavityarray.analysis import finesse_from_spectrum, pearson_matrix, window_sums, windows_from_centers
from cavityarray.atomsim import (
    DetectorModel, FrameGeometry, expected_frame, loading_fractions, port_means, read_frames,
    simulate_detuning_scan, simulate_frames, simulate_loading, simulate_spcm_trace, simulate_spectrum,
    triangle_wave, truth_rows, write_frames,
)
from cavityarray.budget import detuning_sensitivity


def test_loading_fractions_p018():
    single, double = loading_fractions(0.18)
    assert single == pytest.approx(0.2952)
    assert double == pytest.approx(0.0324)


def test_loading_p018_within_3_sigma():
    n = 100_000
    occ = simulate_loading(0.18, 1, n, seed=5).occupancy[:, 0]
    for k, p in zip((1, 2), loading_fractions(0.18)):
        frac = np.mean(occ == k)
        assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_loading_trivial_limits():
    assert not simulate_loading(0.0, 4, 50, seed=1).waists.any()
    assert (simulate_loading(1.0, 4, 50, seed=1).occupancy == 2).all()


def test_loading_validation():
    with pytest.raises(ValueError):
        simulate_loading(1.2, 1, 1)
    with pytest.raises(ValueError):
        simulate_loading(0.5, 0, 1)


def test_loading_deterministic_and_chunk_stable():
    a = simulate_loading(0.3, 9, 3000, seed=42)
    b = simulate_loading(0.3, 9, 3000, seed=42)
    np.testing.assert_array_equal(a.waists, b.waists)
    assert (a.occupancy == a.waists.sum(axis=2)).all()
    # a prefix of a longer run is the shorter run
    c = simulate_loading(0.3, 9, 1024, seed=42)
    np.testing.assert_array_equal(a.waists[:1024], c.waists)


def test_geometry_conjugates_exact():
    g = FrameGeometry.grid()
    np.testing.assert_array_equal(g.conjugate, 2 * np.asarray(g.center) - g.ports)
    assert g.all_ports().shape == (18, 2)
    with pytest.raises(ValueError):
        FrameGeometry((10, 10), [(1.0, 1.0)], (8.0, 8.0))


def test_zero_rate_frame_mean():
    g = FrameGeometry.grid()
    det = DetectorModel(rate_hz=0.0, background=0.0)
    occ = simulate_loading(1.0, g.n_cavities, 1, seed=0)
    fs = simulate_frames(occ, g, det, seed=3)
    npx = fs.frames[0].size
    assert abs(fs.frames.mean() - det.offset) < 4 * det.read_noise / math.sqrt(npx)


def test_per_waist_ports():
    g = FrameGeometry.grid()
    det = DetectorModel()
    occ = simulate_loading(0.5, g.n_cavities, 400, seed=9)
    fs = simulate_frames(occ, g, det, seed=10)
    n = g.n_cavities
    # no photons on the port of an empty waist, and the cavity sum follows the occupancy
    assert (fs.photons[:, :n][~occ.waists[:, :, 0]] == 0).all()
    assert (fs.photons[:, n:][~occ.waists[:, :, 1]] == 0).all()
    mu = det.photons_per_atom
    total = fs.photons[:, :n] + fs.photons[:, n:]
    for k in (0, 1, 2):
        sel = occ.occupancy == k
        m = total[sel].mean()
        assert abs(m - k * mu) < 4 * math.sqrt(max(k * mu, 1e-9) / sel.sum()) + 1e-12
    means = port_means(occ, det)
    np.testing.assert_array_equal(means[:, :n] + means[:, n:], mu * occ.occupancy)


def test_photon_mean_per_occupied_site():
    g = FrameGeometry.grid(n_side=1, shape=(21, 21))
    det = DetectorModel()
    occ = simulate_loading(1.0, 1, 10_000, seed=2)
    fs = simulate_frames(occ, g, det, seed=4)
    mu = det.photons_per_atom
    est = fs.photons[:, 0].mean()
    assert abs(est - mu) < 3 * math.sqrt(mu / 10_000)


def test_expected_frame_matches_mean():
    g = FrameGeometry.grid(n_side=1, shape=(21, 21))
    det = DetectorModel()
    occ = simulate_loading(1.0, 1, 4000, seed=2)
    fs = simulate_frames(occ, g, det, seed=8)
    ideal = expected_frame(port_means(occ, det)[0], g, det)
    err = fs.frames.mean(axis=0) - ideal
    assert np.abs(err).max() < 6 * ideal.std() / math.sqrt(4000) + 5 * det.em_gain * 2 / math.sqrt(4000)
    assert abs(fs.frames.astype(float).sum(axis=(1, 2)).mean() - ideal.sum()) / ideal.sum() < 2e-3


def test_shared_protocol_conjugate_correlation():
    g = FrameGeometry.grid()
    det = DetectorModel(exposure_s=20e-3)
    occ = simulate_loading(0.5, g.n_cavities, 500, seed=11)
    fs = simulate_frames(occ, g, det, seed=12, protocol="shared")
    s = window_sums(fs.frames, windows_from_centers(g.all_ports()), offset=det.offset)
    n = g.n_cavities
    for c in range(n):
        assert np.corrcoef(s[:, c], s[:, n + c])[0, 1] > 0.9


def test_independent_cavities_uncorrelated():
    g = FrameGeometry.grid()
    shots = 2000
    occ = simulate_loading(0.3, g.n_cavities, shots, seed=21)
    fs = simulate_frames(occ, g, seed=22)
    s = window_sums(fs.frames, windows_from_centers(g.all_ports()), offset=500)
    n = g.n_cavities
    per_cavity = s[:, :n] + s[:, n:]
    r = pearson_matrix(per_cavity).matrix
    off = r[~np.eye(n, dtype=bool)]
    assert np.abs(off).max() < 3 / math.sqrt(shots) + 0.02


def test_frames_deterministic():
    g = FrameGeometry.grid()
    occ = simulate_loading(0.4, g.n_cavities, 100, seed=1)
    a = simulate_frames(occ, g, seed=5).frames
    b = simulate_frames(occ, g, seed=5).frames
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, simulate_frames(occ, g, seed=6).frames)


def test_frames_validation():
    g = FrameGeometry.grid()
    occ = simulate_loading(0.4, 2, 5, seed=1)
    with pytest.raises(ValueError):
        simulate_frames(occ, g)
    with pytest.raises(ValueError):
        port_means(simulate_loading(0.4, 9, 5), DetectorModel(), protocol="bogus")


def test_frame_container_roundtrip(tmp_path):
    g = FrameGeometry.grid()
    occ = simulate_loading(0.4, g.n_cavities, 7, seed=1)
    fs = simulate_frames(occ, g, seed=5)
    p = tmp_path / "f.bin"
    write_frames(p, fs.frames)
    np.testing.assert_array_equal(read_frames(p), fs.frames)
    buf = io.BytesIO()
    write_frames(buf, fs.frames)
    assert buf.getvalue() == p.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTFRAME" + p.read_bytes()[8:])
    with pytest.raises(ValueError):
        read_frames(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(p.read_bytes()[:-2])
    with pytest.raises(ValueError):
        read_frames(tmp_path / "short.bin")
    rows = truth_rows(fs, occ)
    assert len(rows) == 7 * g.n_cavities


def test_spcm_no_atom_dark_counts():
    tr = simulate_spcm_trace(np.zeros(200, bool), 5000.0, 300.0, 1.0, 0.1, seed=3)
    assert np.isinf(tr.loss_time).all()
    n = tr.counts.size
    mean = 300.0 * 1e-3
    assert abs(tr.counts.mean() - mean) < 4 * math.sqrt(mean / n)
    assert (tr.counts >= 0).all()
    np.testing.assert_allclose(np.diff(tr.times), 1e-3)


def test_spcm_survival_at_4ms():
    tr = simulate_spcm_trace(np.ones(200_000, bool), 5000.0, 300.0, 1.0, 0.005, seed=4)
    surv = np.mean(tr.loss_time > 0.004)
    assert abs(surv - math.exp(-0.004)) < 3 * math.sqrt(0.004 / 200_000)


def test_spcm_deterministic_and_validation():
    a = simulate_spcm_trace([True, False, True], 5000.0, 300.0, 0.02, 0.05, seed=8)
    b = simulate_spcm_trace([True, False, True], 5000.0, 300.0, 0.02, 0.05, seed=8)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.loss_time, b.loss_time)
    with pytest.raises(ValueError):
        simulate_spcm_trace(True, -1.0, 0.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        simulate_spcm_trace(True, 1.0, 0.0, 0.0, 0.01)


def test_spectrum_minima_at_fsr_multiples():
    fsr = 1.0
    f, r = simulate_spectrum(fsr, fsr / 13.4, samples=6001, f_start=-0.5, f_stop=2.5)
    for n in (0, 1, 2):
        sel = np.abs(f - n) < 0.4
        assert f[sel][np.argmin(r[sel])] == pytest.approx(n, abs=1e-12)


def test_spectrum_degenerate_modes_coincide():
    x = np.array([0.0, 1.0, 2.0])
    det = detuning_sensitivity(x, 19.0, 0.0)
    f, r = simulate_spectrum(1.0, 0.1, depth=0.3, detunings=det)
    f1, r1 = simulate_spectrum(1.0, 0.1, depth=0.9)
    np.testing.assert_allclose(r, r1, atol=1e-12)
    f2, r2 = simulate_spectrum(1.0, 0.1, depth=0.3, detunings=detuning_sensitivity(x, 19.0, 1.0))
    assert np.abs(r2 - r1).max() > 0.1


def test_spectrum_fit_roundtrip_noiseless():
    f, r = simulate_spectrum(1.0, 1.0 / 13.4, depth=0.6)
    fit = finesse_from_spectrum(f, r)
    assert fit.finesse == pytest.approx(13.4, rel=0.02)


@settings(max_examples=20, deadline=None)
@given(finesse=st.floats(5.0, 40.0), depth=st.floats(0.2, 0.9))
def test_spectrum_fit_roundtrip_property(finesse, depth):
    f, r = simulate_spectrum(1.0, 1.0 / finesse, depth=depth, samples=6000)
    assert finesse_from_spectrum(f, r).finesse == pytest.approx(finesse, rel=0.01)


def test_spectrum_validation():
    with pytest.raises(ValueError):
        simulate_spectrum(1.0, 1.5)


def test_triangle_wave():
    np.testing.assert_allclose(triangle_wave([0.0, 0.25, 0.5, 0.75, 1.0, -0.25]), [0, 0.25, 0.5, 0.25, 0, 0.25])


def test_detuning_scan_shape_and_center():
    obs = simulate_detuning_scan([0.0, 1.0, 2.0], np.linspace(-2, 2, 21), 19.0)
    assert obs.shape == (3, 21)
    assert (obs[0] == 0).all()
    assert obs.min() >= 0 and obs.max() <= 0.5
