#!/usr/bin/env python3
"""Time the histogram kernels and the eta search on both backends.

The eta search spends nearly all of its budget inside hist_counts, the
probe-grid gather kernel.  This script times that kernel and a whole
search_eta call with the compiled extension active and again with
DARKFORGE_FORCE_PYTHON=1, confirms the two backends return bit-identical
counts, and prints a comparison table.

Run from the repository root after an editable install:

    python3 benchmarks/bench_hist.py
    python3 benchmarks/bench_hist.py --width 1920 --height 1080 --repeats 9
"""

import argparse
import os
import time

import numpy as np

from darkforge._histcore import (
    build_luma_tables,
    build_qlut,
    compiled_available,
    hist_counts,
    probe_stride,
    split_sites,
)
from darkforge.illumination import search_eta
from darkforge.imaging import BayerFrame, Cfa


def synthetic_frame(w, h, lo, hi, seed):
    rng = np.random.default_rng(seed)
    black, white = 512, 16383
    norm = rng.uniform(lo, hi, size=(h, w))
    data = (black + np.rint(norm * (white - black))).astype(np.uint16)
    return BayerFrame(w, h, Cfa.RGGB, black, white, 800.0, 0.1, data)


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(args):
    frame = synthetic_frame(args.width, args.height, 0.2, 0.9, 7)
    standard = synthetic_frame(args.width, args.height, 0.02, 0.12, 8)
    tables = build_luma_tables(frame.black_level, frame.white_level,
                               (1.0, 1.0, 1.0))
    sites = split_sites(frame, probe_stride(frame))
    qlut = build_qlut(frame.black_level, frame.white_level, 0.37)

    backends = [("pure", "1")]
    if compiled_available():
        backends.insert(0, ("compiled", None))
    else:
        print("compiled extension not importable; timing the numpy "
              "fallback only")

    rows, counts = [], {}
    for label, force in backends:
        if force is None:
            os.environ.pop("DARKFORGE_FORCE_PYTHON", None)
        else:
            os.environ["DARKFORGE_FORCE_PYTHON"] = force
        counts[label] = hist_counts(sites, qlut, tables, args.bins)
        kernel_s = best_of(
            lambda: hist_counts(sites, qlut, tables, args.bins),
            args.repeats * 10)
        search_s = best_of(
            lambda: search_eta(frame, standard, bins=args.bins),
            args.repeats)
        rows.append((label, kernel_s, search_s))

    print(f"\nframe {args.width}x{args.height}, {args.bins} bins, "
          f"probe sites {sites[0].size}, best of "
          f"{args.repeats * 10}/{args.repeats} repeats")
    print(f"{'backend':<10}{'hist_counts':>14}{'search_eta':>13}")
    for label, kernel_s, search_s in rows:
        print(f"{label:<10}{kernel_s * 1e3:>11.2f} ms{search_s:>11.3f} s")
    if len(rows) == 2:
        speedup = rows[1][1] / rows[0][1]
        same = np.array_equal(counts["compiled"], counts["pure"])
        print(f"\nkernel speedup {speedup:.1f}x; counts bit-identical: "
              f"{same}")
        if not same:
            return 1
    return 0


def main():
    parser = argparse.ArgumentParser(
        description="benchmark the compiled vs pure histogram kernels")
    parser.add_argument("--width", type=int, default=3840)
    parser.add_argument("--height", type=int, default=2160)
    parser.add_argument("--bins", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=5)
    had_force = os.environ.get("DARKFORGE_FORCE_PYTHON")
    try:
        return run(parser.parse_args())
    finally:
        if had_force is None:
            os.environ.pop("DARKFORGE_FORCE_PYTHON", None)
        else:
            os.environ["DARKFORGE_FORCE_PYTHON"] = had_force


if __name__ == "__main__":
    raise SystemExit(main())
