import json
import subprocess
import sys

import pytest

from cavityarray.cli import EXIT_COMPUTE, EXIT_OK, EXIT_USAGE, fmt, run


def outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def manifest(d, sub):
    return json.loads((d / f"{sub}.manifest.json").read_text())


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage:" in err


def test_unknown_flag(capsys, tmp_path):
    assert run(["budget", "--bogus", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_console_script_usage():
    r = subprocess.run([sys.executable, "-m", "cavityarray.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE
    assert "usage:" in r.stderr


def test_help_exits_zero(capsys):
    assert run(["scan-map", "--help"]) == EXIT_OK
    assert "--grid" in capsys.readouterr().out


def test_fmt_precision():
    assert fmt(1 / 3) == "0.333333333333"
    assert fmt(7) == "7" and fmt(True) == "1"


def test_budget_bundled_config_name(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["budget", "--config", "paper.cfg", "--out", "out"]) == EXIT_OK
    rep = json.loads((tmp_path / "out" / "budget_report.json").read_text())
    assert rep
    m = manifest(tmp_path / "out", "budget")
    assert set(m) == {"subcommand", "config", "seed", "version", "outputs"}
    assert m["outputs"] == ["budget_report.json", "budget_report.csv"]


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert run(["budget", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "cannot read" in capsys.readouterr().err


def test_bad_prescription_is_computation_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[cavity]\nwavelength_trap_nm = -1\n")
    assert run(["trace", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_COMPUTE
    assert "computation failed" in capsys.readouterr().err


def test_scan_map_grid(tmp_path):
    assert run(["scan-map", "--grid", "64x64", "--span", "10mm", "--out", str(tmp_path), "--cap", "5"]) == EXIT_OK
    lines = (tmp_path / "scan_map.csv").read_text().splitlines()
    assert lines[0] == "x_mm,y_mm,round_trips"
    assert len(lines) == 1 + 4096


def test_scan_map_bad_grid(capsys):
    assert run(["scan-map", "--grid", "64by64"]) == EXIT_USAGE


def test_scan_map_thread_invariant(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base = ["scan-map", "--grid", "16x16", "--span", "8mm", "--cap", "20"]
    assert run(base + ["--threads", "1", "--out", str(a)]) == EXIT_OK
    assert run(base + ["--threads", "4", "--out", str(b)]) == EXIT_OK
    assert (a / "scan_map.csv").read_bytes() == (b / "scan_map.csv").read_bytes()


def test_trace_and_stability(tmp_path):
    assert run(["trace", "--x-mm", "0.01", "--cap", "10", "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "trace_report.json").read_text())["round_trips"] == 10
    assert run(["stability", "--steps", "41", "--out", str(tmp_path)]) == EXIT_OK
    w = json.loads((tmp_path / "stability_report.json").read_text())["stable_width_mm"]
    assert w == pytest.approx(0.00934, rel=0.1)
    assert run(["stability", "--element", "nope", "--out", str(tmp_path)]) == EXIT_USAGE


def test_degeneracy(tmp_path):
    assert run(["degeneracy", "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "degeneracy_report.json").read_text())
    assert rep["capacity"] == pytest.approx(597, abs=1)
    assert rep["capacity_floor"] == 596


def test_hologram(tmp_path):
    args = ["hologram", "--array", "3", "--grid", "128", "--slm-pitch-um", "32", "--iterations", "5",
            "--out", str(tmp_path)]
    assert run(args) == EXIT_OK
    assert (tmp_path / "mask.pgm").read_bytes().startswith(b"P5\n128 128\n255\n")
    assert len((tmp_path / "spots.csv").read_text().splitlines()) == 10


def test_simulate_seed_recorded_when_omitted(tmp_path):
    assert run(["simulate", "--shots", "5", "--out", str(tmp_path)]) == EXIT_OK
    seed = manifest(tmp_path, "simulate")["seed"]
    assert isinstance(seed, int)
    again = tmp_path / "again"
    assert run(["simulate", "--shots", "5", "--seed", str(seed), "--out", str(again)]) == EXIT_OK
    assert (tmp_path / "frames.bin").read_bytes() == (again / "frames.bin").read_bytes()


def test_simulate_then_analyze(tmp_path):
    assert run(["simulate", "--shots", "200", "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK
    args = ["analyze", "--frames", str(tmp_path / "frames.bin"), "--sites", str(tmp_path / "sites.csv"),
            "--out", str(tmp_path)]
    assert run(args + ["--model", "gaussian"]) == EXIT_OK
    rep = json.loads((tmp_path / "analysis_report.json").read_text())
    assert 0.97 < rep["pooled"]["fidelity"] <= 1.0
    assert len(rep["site_fidelity"]) == 18
    assert run(args + ["--pair", "--mode", "postprocess", "--model", "gaussian"]) == EXIT_OK
    rep = json.loads((tmp_path / "analysis_report.json").read_text())
    assert len(rep["site_fidelity"]) == 9


def test_analyze_scores_csv(tmp_path, rng):
    import numpy as np
    s = np.concatenate([rng.normal(0, 1, (150, 2)), rng.normal(8, 1, (150, 2))])
    s[:, 1] = 4.0
    (tmp_path / "s.csv").write_text("a,b\n" + "\n".join(f"{x},{y}" for x, y in s))
    assert run(["analyze", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "analysis_report.json").read_text())
    assert rep["zero_variance_sites"] == ["b"]
    assert rep["site_fidelity"]["b"] is None and rep["site_fidelity"]["a"] > 0.99


def test_analyze_needs_one_input(capsys):
    assert run(["analyze"]) == EXIT_USAGE


@pytest.mark.parametrize("argv", [
    ["simulate", "--shots", "50", "--seed", "11"],
    ["scan-map", "--grid", "8x8", "--span", "6mm", "--cap", "10"],
    ["budget"],
    ["hologram", "--array", "2", "--grid", "64", "--slm-pitch-um", "64", "--iterations", "3"],
])
def test_byte_identical_reruns(tmp_path, argv):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(argv + ["--out", str(a)]) == EXIT_OK
    assert run(argv + ["--out", str(b)]) == EXIT_OK
    assert outputs(a) == outputs(b)
