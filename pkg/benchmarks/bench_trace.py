"""Compiled versus numpy ray-trace kernel on a survival map.

    python benchmarks/bench_trace.py [--grid 64] [--repeat 3] [--threads 1]

Both kernels trace the same launch grid of the bundled design; the script
reports wall time per map, rays per second and how far the round-trip counts
disagree.
"""
import argparse
import time

import numpy as np

from cavityarray.prescription import bundled_prescription
from cavityarray.raytrace import get_kernel, survival_map


def best_time(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=64)
    ap.add_argument("--span", type=float, default=10.0)
    ap.add_argument("--cap", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--no-mla", action="store_true")
    args = ap.parse_args(argv)

    p = bundled_prescription("paper_nomla" if args.no_mla else "paper")
    n = args.grid * args.grid
    results = {}
    for name in ("compiled", "python"):
        try:
            kernel = get_kernel(name)
        except ImportError:
            print(f"{name:>9}: not available")
            continue
        dt, sm = best_time(lambda: survival_map(p, span_mm=args.span, resolution=args.grid, cap=args.cap,
                                                threads=args.threads, kernel=kernel), args.repeat)
        results[name] = (dt, sm)
        print(f"{name:>9}: {dt:8.3f} s per {args.grid}x{args.grid} map, {n / dt:10.0f} rays/s, "
              f"{int(sm.counts.sum())} round trips")
    if len(results) == 2:
        (tc, a), (tp, b) = results["compiled"], results["python"]
        diff = np.abs(a.counts.astype(int) - b.counts.astype(int))
        # rays that clip after many passes can flip by one trip on last-bit rounding differences
        print(f"speed-up {tp / tc:.1f}x, cells differing: {int((diff > 0).sum())}/{n}, "
              f"max difference {int(diff.max())} round trips")


if __name__ == "__main__":
    main()
