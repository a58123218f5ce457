import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from cavityarray.hologram import (
    HologramError, HologramSpec, grating_wavevectors, mode_overlaps, optimize_positions, pgm_bytes,
    predicted_pixels, read_targets_csv, simulate_farfield, spot_centroids, spot_powers,
    square_array, synthesize_phase_mask, uniformity, wgs_homogenize, write_pgm,
)


@pytest.fixture(scope="module")
def wgs5():
    return wgs_homogenize(square_array(5, 5.0), iterations=30)


def nine_targets():
    return square_array(3, 6.0)


def test_wavevectors():
    spec = HologramSpec([0.0, 3.0, 6.0], [0.0, -1.0, -2.0])
    k = grating_wavevectors(spec)
    np.testing.assert_array_equal(k[0], [0.0, 0.0])
    np.testing.assert_allclose(k[2], 2 * k[1], rtol=1e-15)
    k2 = grating_wavevectors(HologramSpec([3.0], [-1.0], f_lens_mm=400.0))
    np.testing.assert_allclose(k2[0], k[1] / 2, rtol=1e-15)
    scale = 2 * math.pi * 100 / (785e-9 * 0.2)
    np.testing.assert_allclose(k[1], scale * np.array([3e-6, -1e-6]), rtol=1e-15)


def test_single_target_is_blazed_grating():
    spec = HologramSpec([4.0], [-2.5], phase=[0.7], grid=64)
    phase = synthesize_phase_mask(spec)
    c = spec.slm_coords()
    kx, ky = grating_wavevectors(spec)[0]
    ramp = ky * c[:, None] + kx * c[None, :] + 0.7
    diff = np.angle(np.exp(1j * (phase - ramp)))
    assert np.abs(diff).max() < 1e-9


def test_two_targets_two_level():
    spec = HologramSpec([5.0, -5.0], [0.0, 0.0], phase=[0.4, 1.0], grid=64)
    phase = synthesize_phase_mask(spec)
    levels = np.unique(np.round(np.mod(phase, 2 * np.pi), 9))
    base = np.mod((0.4 + 1.0) / 2, 2 * np.pi)
    expect = np.sort(np.round(np.mod([base, base + np.pi], 2 * np.pi), 9))
    assert set(levels) <= set(expect)
    assert len(levels) == 2


@settings(max_examples=30, deadline=None)
@given(xy=st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=1, max_size=6),
       seed=st.integers(0, 1000))
def test_phase_range(xy, seed):
    rng = np.random.default_rng(seed)
    x, y = zip(*xy)
    spec = HologramSpec(x, y, amp=rng.uniform(0.1, 1, len(x)), phase=rng.uniform(0, 6.28, len(x)), grid=32)
    phase = synthesize_phase_mask(spec)
    assert phase.min() >= -np.pi and phase.max() < np.pi


def test_nine_spots_at_predicted_pixels():
    spec = nine_targets()
    far = simulate_farfield(synthesize_phase_mask(spec), spec.input_intensity())
    pred = predicted_pixels(spec)
    cen = spot_centroids(far, pred, radius=4)
    assert np.abs(cen - pred).max() < 0.5


def test_spot_count_matches_targets():
    spec = nine_targets()
    far = simulate_farfield(synthesize_phase_mask(spec), spec.input_intensity())
    peaks = (far == ndimage.maximum_filter(far, size=9)) & (far > 0.2 * far.max())
    assert peaks.sum() == 9


def test_uniform_phase_dc_spot():
    n = 32
    far = simulate_farfield(np.zeros((n, n)), np.ones((n, n)))
    p = 2 * n
    assert np.unravel_index(np.argmax(far), far.shape) == (p // 2, p // 2)
    assert far[p // 2, p // 2] == pytest.approx(n ** 4)


def test_parseval(rng):
    n = 64
    i0 = rng.uniform(0, 1, (n, n))
    phase = rng.uniform(-np.pi, np.pi, (n, n))
    far = simulate_farfield(phase, i0, pad=2)
    assert far.sum() / (i0.sum() * (2 * n) ** 2) == pytest.approx(1.0, abs=1e-9)


def test_incongruent_arrays():
    with pytest.raises(ValueError):
        simulate_farfield(np.zeros((4, 4)), np.ones((4, 5)))


def test_shift_theorem():
    base = HologramSpec([0.0], [0.0], grid=128)
    i0 = base.input_intensity()
    cents = []
    for x in (0.0, 2.0, 4.0, 6.0):
        spec = base.with_targets(x_um=[x])
        far = simulate_farfield(synthesize_phase_mask(spec), i0)
        cents.append(spot_centroids(far, predicted_pixels(spec), radius=4)[0, 1])
    steps = np.diff(cents)
    assert np.allclose(steps, steps[0], atol=0.05)
    assert steps[0] > 0


def test_nyquist_guard():
    with pytest.raises(HologramError):
        predicted_pixels(HologramSpec([1e4], [0.0]))


def test_spot_window_check():
    spec = HologramSpec([0.0], [0.0], grid=64)
    far = simulate_farfield(synthesize_phase_mask(spec), spec.input_intensity())
    with pytest.raises(HologramError, match="search window"):
        spot_powers(far, [(64 + 10, 64 + 10)], check=True)


def test_wgs_single_spot():
    res = wgs_homogenize(HologramSpec([2.0], [1.0], grid=64), iterations=1)
    assert res.history == [0.0]


def test_wgs_five_by_five(wgs5):
    assert min(wgs5.history) < 0.02
    assert uniformity(wgs5.powers) < 0.02
    assert wgs5.powers.max() / wgs5.powers.min() < 1.05
    h = wgs5.history
    for a, b in zip(h[3:-1], h[4:]):
        assert b <= a * 1.10


def test_wgs_rejects_zero_iterations():
    with pytest.raises(ValueError):
        wgs_homogenize(HologramSpec([0.0], [0.0], grid=16), iterations=0)


def small_spec(x, y):
    return HologramSpec(x, y, grid=128, pitch_um=32.0)


def test_optimize_centered_spot():
    spec = small_spec([0.0], [0.0])
    res = optimize_positions(spec, [(0.0, 0.0)])
    assert res.x_um[0] == 0.0 and res.y_um[0] == 0.0
    assert res.objective == [res.objective[0]]
    assert res.converged


def test_optimize_recovers_offset():
    spec = small_spec([0.0], [0.0])
    w = spec.spot_waist_um()
    start = spec.with_targets(x_um=[0.2 * w], y_um=[-0.2 * w])
    res = optimize_positions(start, [(0.0, 0.0)])
    assert abs(res.x_um[0]) < 0.02 * w and abs(res.y_um[0]) < 0.02 * w
    assert all(b >= a for a, b in zip(res.objective, res.objective[1:]))


def test_optimize_several_spots_monotone():
    spec = small_spec([-8.0, 0.0, 8.0], [0.0, 4.0, 0.0])
    w = spec.spot_waist_um()
    start = spec.with_targets(x_um=np.array(spec.x_um) + 0.15 * w)
    res = optimize_positions(start, list(zip(spec.x_um, spec.y_um)))
    assert all(b >= a for a, b in zip(res.objective, res.objective[1:]))
    assert np.abs(res.x_um - np.array(spec.x_um)).max() < 0.05 * w
    base = mode_overlaps(start, list(zip(spec.x_um, spec.y_um))).sum()
    assert res.objective[-1] > base


def test_optimize_requires_nearby_start():
    spec = small_spec([0.0], [0.0])
    with pytest.raises(ValueError):
        optimize_positions(spec, [(100.0, 0.0)])


def test_spot_waist_default():
    assert HologramSpec([0.0], [0.0]).spot_waist_um() == pytest.approx(1.0, rel=1e-3)


def test_spec_validation():
    with pytest.raises(ValueError):
        HologramSpec([], [])
    with pytest.raises(ValueError):
        HologramSpec([0.0], [0.0], amp=[np.nan])
    with pytest.raises(ValueError):
        HologramSpec([0.0], [0.0], grid=1)


def test_pgm_and_targets_io(tmp_path):
    phase = np.array([[-np.pi, 0.0], [np.pi - 1e-9, -1.0]])
    data = pgm_bytes(phase)
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[-4:]) == [0, 128, 255, 87]
    write_pgm(tmp_path / "m.pgm", phase)
    assert (tmp_path / "m.pgm").read_bytes() == data
    x, y, a, p = read_targets_csv("x_um,y_um,amp,phase\n1,2,1,0\n-1,0.5,0.5,3\n")
    np.testing.assert_array_equal(x, [1, -1])
    with pytest.raises(ValueError):
        read_targets_csv("a,b\n1,2\n")
