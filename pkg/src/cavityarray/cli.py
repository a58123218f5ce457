"""Command-line entry point.

Every run writes its outputs plus one ``<subcommand>.manifest.json`` (the
resolved configuration, seed, version and output list) into ``--out``.
Files are written once via write-then-rename.  Exit codes: 0 success,
2 usage error, 3 computation error.
"""
from __future__ import annotations

import argparse
import io
import json
import math
import os
import re
import secrets
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_COMPUTE = 0, 2, 3


class UsageError(Exception):
    pass


# -- serialization ---------------------------------------------------------

def fmt(x) -> str:
    """Fixed 12-significant-digit rendering used for every numeric output."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in (v.tolist() if isinstance(v, np.ndarray) else v)]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return fmt(f) if not math.isfinite(f) else float(fmt(f))
    return v


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for r in rows:
        out.write(",".join(v if isinstance(v, str) else fmt(v) for v in r) + "\n")
    return out.getvalue()


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


class Run:
    """Collects outputs of one subcommand and writes the manifest last."""

    def __init__(self, args, config: dict):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.sub = args.command
        self.config = config
        self.seed = getattr(args, "seed", None)
        self.outputs = []

    def write(self, name: str, data) -> Path:
        path = self.out / name
        _atomic_write(path, data)
        self.outputs.append(name)
        return path

    def finish(self) -> None:
        manifest = {
            "subcommand": self.sub,
            "config": self.config,
            "seed": self.seed,
            "version": __version__,
            "outputs": self.outputs,
        }
        _atomic_write(self.out / f"{self.sub}.manifest.json", json_text(manifest))


# -- argument helpers ------------------------------------------------------

def _grid(text: str):
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise argparse.ArgumentTypeError("expected NxM with positive integers, e.g. 64x64")
    return int(m.group(1)), int(m.group(2))


def _length_mm(text: str) -> float:
    m = re.fullmatch(r"\s*([-+0-9.eE]+)\s*(mm|um|m)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError("expected a length such as 10mm")
    try:
        v = float(m.group(1))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected a length such as 10mm") from exc
    return v * {"mm": 1.0, None: 1.0, "um": 1e-3, "m": 1e3}[m.group(2)]


def _pair(text: str):
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers") from exc
    return a, b


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected an integer") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("CAVITYARRAY_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError("CAVITYARRAY_THREADS must be an integer") from exc
    return os.cpu_count() or 1


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _config_text(path, bundled: dict):
    """Read ``path``; a missing file named like a bundled config falls back to it."""
    if not Path(path).exists() and Path(path).name in bundled:
        name = bundled[Path(path).name]
        return name[1](), f"bundled:{name[0]}"
    return _read_text(path), str(path)


def _prescription(args):
    from .prescription import bundled_config_text, load_prescription

    if args.config:
        names = {f"{n}{ext}": (n, lambda n=n: bundled_config_text(n))
                 for n in ("paper", "paper_nomla") for ext in ("", ".cfg")}
        text, src = _config_text(args.config, names)
        return load_prescription(text), src
    name = "paper_nomla" if getattr(args, "no_mla", False) else "paper"
    return load_prescription(bundled_config_text(name)), f"bundled:{name}"


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(63)
    return args.seed


# -- subcommands -----------------------------------------------------------

def cmd_trace(args) -> dict:
    from .raytrace import round_trip_map

    p, src = _prescription(args)
    state = np.array([[args.x_mm * 1e-3, args.y_mm * 1e-3, args.slope_x, args.slope_y]])
    rows = [(0, *(state[0, :2] * 1e3), *state[0, 2:])]
    survived = 0
    for k in range(1, args.cap + 1):
        state = round_trip_map(p, state)
        if np.isnan(state).any():
            break
        survived = k
        rows.append((k, *(state[0, :2] * 1e3), *state[0, 2:]))
    cfg = {"config": src, "x_mm": args.x_mm, "y_mm": args.y_mm, "slope_x": args.slope_x,
           "slope_y": args.slope_y, "cap": args.cap}
    run = Run(args, cfg)
    run.write("trace.csv", csv_text(["round_trip", "x_mm", "y_mm", "slope_x", "slope_y"], rows))
    run.write("trace_report.json", json_text({"round_trips": survived, "capped": survived == args.cap}))
    return run


def cmd_scan_map(args) -> dict:
    from .raytrace import survival_map

    p, src = _prescription(args)
    nx, ny = args.grid
    sm = survival_map(p, center_mm=args.center, span_mm=args.span, resolution=(nx, ny), cap=args.cap,
                      threads=_threads(args))
    cfg = {"config": src, "grid": f"{nx}x{ny}", "span_mm": args.span, "center_mm": list(args.center),
           "cap": args.cap}
    run = Run(args, cfg)
    rows = [(x, y, int(c)) for x, y, c in sm.rows()]
    run.write("scan_map.csv", csv_text(["x_mm", "y_mm", "round_trips"], rows))
    return run


def cmd_stability(args) -> dict:
    from .paraxial import stability_scan

    p, src = _prescription(args)
    try:
        p.element(args.element)
    except KeyError as exc:
        raise UsageError(f"no element named {args.element!r}") from exc
    sc = stability_scan(p, args.element, args.range, args.steps)
    rows = [(d, w, g, bool(s)) for d, w, g, s in zip(sc.displacement_mm, sc.waist_um, sc.gouy_rad, sc.stable)]
    cfg = {"config": src, "element": args.element, "range_mm": list(args.range), "steps": args.steps}
    run = Run(args, cfg)
    run.write("stability.csv", csv_text(["displacement_mm", "waist_um", "gouy_rad", "stable"], rows))
    try:
        width = sc.stable_width_mm()
    except ValueError:
        width = float("nan")
    run.write("stability_report.json", json_text({"stable_width_mm": width,
                                                   "stable_samples": int(sc.stable.sum())}))
    return run


def cmd_budget(args) -> dict:
    from .budget import budget_report, bundled_budget_text, load_budget_config

    names = {n: ("budget_paper", bundled_budget_text)
             for n in ("paper", "paper.cfg", "budget_paper", "budget_paper.cfg")}
    text, src = _config_text(args.config, names) if args.config else (bundled_budget_text(), "bundled:budget_paper")
    rep = budget_report(load_budget_config(text))
    run = Run(args, {"config": src})
    run.write("budget_report.json", json_text(rep))
    rows = [(k, v["value"], v["formula"]) for k, v in rep.items()]
    out = io.StringIO()
    out.write("quantity,value,formula\n")
    for k, v, f in rows:
        out.write(f'"{k}",{fmt(v)},"{f}"\n')
    run.write("budget_report.csv", out.getvalue())
    return run


def cmd_degeneracy(args) -> dict:
    from .budget import degeneracy_capacity, detuning_sensitivity

    n = degeneracy_capacity(args.finesse, args.z0_um, args.xi_mm)
    cfg = {"finesse": args.finesse, "z0_um": args.z0_um, "xi_mm": args.xi_mm,
           "max_index": args.max_index, "dz_mm": args.dz_mm}
    run = Run(args, cfg)
    run.write("degeneracy_report.json", json_text({"capacity": n, "capacity_floor": math.floor(n)}))
    xs = np.arange(-args.max_index, args.max_index + 1)
    det = detuning_sensitivity(xs, args.xi_mm, args.dz_mm)
    bw = [args.xi_mm / (x * x) if x else float("inf") for x in xs]
    run.write("detuning.csv", csv_text(["x", "detuning_fsr", "bandwidth_mm"],
                                       [(int(x), d, b) for x, d, b in zip(xs, det, bw)]))
    return run


def cmd_hologram(args) -> dict:
    from . import hologram as H

    kw = dict(grid=args.grid, pitch_um=args.slm_pitch_um, m_tel=args.m_tel, f_lens_mm=args.f_lens_mm,
              wavelength_nm=args.wavelength_nm, input_waist_mm=args.input_waist_mm)
    if args.targets:
        x, y, a, ph = H.read_targets_csv(_read_text(args.targets))
        spec = H.HologramSpec(x, y, a, ph, **kw)
        src = str(args.targets)
    else:
        spec = H.square_array(args.array, args.pitch_um, **kw)
        src = f"array:{args.array}x{args.array}"
    if args.iterations > 0:
        res = H.wgs_homogenize(spec, args.iterations)
        spec, phase, powers, hist = res.spec, res.phase, res.powers, res.history
    else:
        phase = H.synthesize_phase_mask(spec)
        far = H.simulate_farfield(phase, spec.input_intensity())
        powers = H.spot_powers(far, H.predicted_pixels(spec), check=True)
        hist = []
    centers = H.predicted_pixels(spec)
    cfg = {"targets": src, "iterations": args.iterations, **kw}
    run = Run(args, cfg)
    run.write("mask.pgm", H.pgm_bytes(phase))
    rel = powers / powers.mean()
    rows = [(i, spec.x_um[i], spec.y_um[i], spec.amp[i], spec.phase[i], centers[i, 0], centers[i, 1], rel[i])
            for i in range(spec.n_targets)]
    run.write("spots.csv", csv_text(["index", "x_um", "y_um", "amp", "phase", "row_px", "col_px",
                                     "relative_power"], rows))
    run.write("hologram_report.json", json_text({"uniformity": H.uniformity(powers),
                                                  "max_over_min": float(powers.max() / powers.min()),
                                                  "history": hist}))
    return run


def cmd_simulate(args) -> dict:
    from . import atomsim as S

    seed = _seed(args)
    geo = S.FrameGeometry.grid(args.side)
    det = replace(S.DetectorModel(), **{k: v for k, v in (("rate_hz", args.rate_hz),
                                                           ("exposure_s", args.exposure_s)) if v is not None})
    ss = np.random.SeedSequence(seed).spawn(2)
    occ = S.simulate_loading(args.p, geo.n_cavities, args.shots, seed=ss[0])
    fs = S.simulate_frames(occ, geo, det, seed=ss[1], protocol=args.protocol)
    cfg = {"p": args.p, "shots": args.shots, "side": args.side, "protocol": args.protocol,
           "detector": S.detector_dict(det), "shape": list(geo.shape)}
    run = Run(args, cfg)
    buf = io.BytesIO()
    S.write_frames(buf, fs.frames)
    run.write("frames.bin", buf.getvalue())
    ports = geo.all_ports()
    n = geo.n_cavities
    site_rows = [(c, k + 1, ports[k * n + c, 0], ports[k * n + c, 1]) for c in range(n) for k in range(2)]
    run.write("sites.csv", csv_text(["cavity", "port", "row", "col"], site_rows))
    head = "".join(f"# {k} = {fmt(v) if not isinstance(v, str) else v}\n"
                   for k, v in sorted({"p": args.p, "protocol": args.protocol, **S.detector_dict(det)}.items()))
    run.write("truth.csv", head + csv_text(["shot", "cavity", "waist1", "waist2", "photons1", "photons2"],
                                           S.truth_rows(fs, occ)))
    return run


def _load_sites(path):
    rows = [ln for ln in _read_text(path).splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0].replace(" ", "") != "cavity,port,row,col":
        raise UsageError("sites CSV must start with header cavity,port,row,col")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    return data


def cmd_analyze(args) -> dict:
    from . import analysis as N
    from .atomsim import read_frames

    if bool(args.frames) == bool(args.scores):
        raise UsageError("give exactly one of --frames or --scores")
    cfg = {"model": args.model}
    if args.frames:
        if not args.sites:
            raise UsageError("--frames requires --sites")
        try:
            frames = read_frames(args.frames)
        except OSError as exc:
            raise UsageError(f"cannot read {args.frames}: {exc}") from exc
        sites = _load_sites(args.sites)
        order = np.lexsort((sites[:, 1], sites[:, 0]))
        sites = sites[order]
        windows = N.windows_from_centers(sites[:, 2:4], args.half_window)
        if args.mode == "raw":
            scores = N.window_sums(frames, windows, args.offset)
        else:
            scores = N.postprocess_frame(frames, args.threshold, args.kernel_sigma, windows)
        cav = sites[:, 0].astype(int)
        labels = [f"c{int(c)}p{int(p)}" for c, p in sites[:, :2]]
        if args.pair:
            groups = [np.flatnonzero(cav == c) for c in np.unique(cav)]
            scores = N.pair_ports(scores, groups)
            labels = [f"c{int(c)}" for c in np.unique(cav)]
        cfg.update({"frames": str(args.frames), "sites": str(args.sites), "mode": args.mode,
                    "half_window": args.half_window, "offset": args.offset, "threshold": args.threshold,
                    "kernel_sigma": args.kernel_sigma, "pair": args.pair})
    else:
        lines = [ln for ln in _read_text(args.scores).splitlines() if ln.strip() and not ln.startswith("#")]
        labels = [h.strip() for h in lines[0].split(",")]
        try:
            scores = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        except ValueError as exc:
            raise UsageError(f"non-numeric entry in {args.scores}") from exc
        cfg["scores"] = str(args.scores)
    fit = N.fit_bimodal(scores.ravel(), args.model)
    corr = N.pearson_matrix(scores)
    per_site = {}
    for j, lab in enumerate(labels):
        col = scores[:, j]
        ok = col.size >= N.MIN_BIMODAL_SAMPLES and not corr.zero_variance[j]
        per_site[lab] = N.fit_bimodal(col, args.model).fidelity if ok else None
    report = {
        "pooled": {"weights": fit.weights, "loc": fit.loc, "scale": fit.scale, "shape": fit.shape,
                   "threshold": fit.threshold, "fidelity": fit.fidelity},
        "site_fidelity": per_site,
        "zero_variance_sites": [labels[i] for i in np.flatnonzero(corr.zero_variance)],
        "max_offdiag_abs_correlation": float(np.nanmax(np.abs(corr.matrix - np.eye(len(labels))))
                                             if len(labels) > 1 else 0.0),
    }
    run = Run(args, cfg)
    run.write("analysis_report.json", json_text(report))
    rows = [(labels[i], *corr.matrix[i]) for i in range(len(labels))]
    run.write("correlation.csv", csv_text(["site", *labels], rows))
    return run


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cavityarray", description="Cavity-array microscope workbench.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    def common(sp, seeded=False, threaded=False, prescription=False):
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        if seeded:
            sp.add_argument("--seed", type=int, default=None, help="RNG seed (chosen and recorded if omitted)")
        if threaded:
            sp.add_argument("--threads", type=_positive_int, default=None,
                            help="worker threads (default: $CAVITYARRAY_THREADS or all cores)")
        if prescription:
            sp.add_argument("--config", default=None, help="prescription config (default: bundled)")
            sp.add_argument("--no-mla", action="store_true", help="use the bundled design without the MLA")
        return sp

    sp = common(sub.add_parser("trace", help="trace one ray round trip by round trip"), prescription=True)
    sp.add_argument("--x-mm", type=float, default=0.0)
    sp.add_argument("--y-mm", type=float, default=0.0)
    sp.add_argument("--slope-x", type=float, default=0.0)
    sp.add_argument("--slope-y", type=float, default=0.0)
    sp.add_argument("--cap", type=_positive_int, default=100)
    sp.set_defaults(func=cmd_trace)

    sp = common(sub.add_parser("scan-map", help="round-trip survival map on a launch grid"),
                threaded=True, prescription=True)
    sp.add_argument("--grid", type=_grid, default=(64, 64), help="NXxNY cells (default 64x64)")
    sp.add_argument("--span", type=_length_mm, default=10.0, help="square span, e.g. 10mm")
    sp.add_argument("--center", type=_pair, default=(0.0, 0.0), help="x,y centre in mm")
    sp.add_argument("--cap", type=_positive_int, default=100)
    sp.set_defaults(func=cmd_scan_map)

    sp = common(sub.add_parser("stability", help="eigenmode versus longitudinal element displacement"),
                prescription=True)
    sp.add_argument("--element", default="asphere")
    sp.add_argument("--range", type=_pair, default=(-0.02, 0.02), help="lo,hi displacement in mm")
    sp.add_argument("--steps", type=_positive_int, default=401)
    sp.set_defaults(func=cmd_stability)

    sp = common(sub.add_parser("budget", help="photon loss and collection budget report"))
    sp.add_argument("--config", default=None, help="budget config (default: bundled)")
    sp.set_defaults(func=cmd_budget)

    sp = common(sub.add_parser("degeneracy", help="simultaneous degeneracy capacity and detunings"))
    sp.add_argument("--finesse", type=float, default=100.0)
    sp.add_argument("--z0-um", type=float, default=1.0)
    sp.add_argument("--xi-mm", type=float, default=19.0)
    sp.add_argument("--max-index", type=int, default=10)
    sp.add_argument("--dz-mm", type=float, default=0.1)
    sp.set_defaults(func=cmd_degeneracy)

    sp = common(sub.add_parser("hologram", help="SLM phase mask with WGS homogenization"))
    sp.add_argument("--targets", default=None, help="CSV x_um,y_um,amp,phase (default: square array)")
    sp.add_argument("--array", type=_positive_int, default=5, help="square array side without --targets")
    sp.add_argument("--pitch-um", type=float, default=5.0, help="array pitch in the atom plane")
    sp.add_argument("--iterations", type=int, default=30)
    sp.add_argument("--grid", type=_positive_int, default=512)
    sp.add_argument("--slm-pitch-um", type=float, default=8.0)
    sp.add_argument("--m-tel", type=float, default=100.0)
    sp.add_argument("--f-lens-mm", type=float, default=200.0)
    sp.add_argument("--wavelength-nm", type=float, default=785.0)
    sp.add_argument("--input-waist-mm", type=float, default=0.5)
    sp.set_defaults(func=cmd_hologram)

    sp = common(sub.add_parser("simulate", help="synthetic doubled-port EMCCD frames"), seeded=True)
    sp.add_argument("--p", type=float, default=0.5, help="loading probability per waist")
    sp.add_argument("--shots", type=_positive_int, default=1000)
    sp.add_argument("--side", type=_positive_int, default=3, help="cavities per array side")
    sp.add_argument("--protocol", choices=("per-waist", "shared"), default="per-waist")
    sp.add_argument("--rate-hz", type=float, default=None)
    sp.add_argument("--exposure-s", type=float, default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("analyze", help="fidelity fits and correlations"))
    sp.add_argument("--frames", default=None, help="binary frame container from simulate")
    sp.add_argument("--sites", default=None, help="sites CSV from simulate")
    sp.add_argument("--scores", default=None, help="CSV score table (header of site labels)")
    sp.add_argument("--model", choices=("gaussian", "skew-gaussian"), default="skew-gaussian")
    sp.add_argument("--mode", choices=("raw", "postprocess"), default="raw")
    sp.add_argument("--half-window", type=int, default=2)
    sp.add_argument("--offset", type=float, default=500.0)
    sp.add_argument("--threshold", type=float, default=580.0, help="pixel threshold for postprocess")
    sp.add_argument("--kernel-sigma", type=float, default=1.0)
    sp.add_argument("--pair", action="store_true", help="sum conjugate ports per cavity")
    sp.set_defaults(func=cmd_analyze)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        r = args.func(args)
        r.finish()
    except UsageError as exc:
        print(f"cavityarray {args.command}: error: {exc}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(f"cavityarray {args.command}: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
