"""Command line figure generation from run outputs."""

import argparse
import os
import sys

from .csvdata import read_polymesh, read_run_csv
from .figures import plot_convergence, plot_mesh


def main_convergence(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plot-convergence")
    parser.add_argument("csvs", nargs="+", help="run CSVs, coarse to fine")
    parser.add_argument("--norm", choices=("LinfL2", "L2H1"), default="LinfL2")
    parser.add_argument("--out", default=None, help="output image path")
    args = parser.parse_args(argv)
    if len(args.csvs) < 2:
        parser.error("need at least two run CSVs")
    try:
        runs = [read_run_csv(p) for p in args.csvs]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out or f"convergence_{args.norm}.png"
    path, rates = plot_convergence(runs, args.norm, out)
    print(f"wrote {path} (error rate {rates['error']:.2f}, "
          f"estimator rate {rates['estimator']:.2f})")
    return 0


def main_mesh(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plot-mesh")
    parser.add_argument("meshfile", help="POLYMESH 1 snapshot")
    parser.add_argument("--out", default=None)
    parser.add_argument("--layer-t", type=float, default=None,
                        help="overlay the layer path x + y = t")
    args = parser.parse_args(argv)
    try:
        mesh = read_polymesh(args.meshfile)
    except (OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out or os.path.splitext(args.meshfile)[0] + ".png"
    overlay = None
    if args.layer_t is not None:
        overlay = lambda x, t=args.layer_t: t - x  # noqa: E731
    plot_mesh(mesh, out, overlay=overlay)
    print(f"wrote {out}")
    return 0
