"""Command line interface: run benchmark experiments from config files."""

import argparse
import os
import sys

from .errors import ConfigError, FoldedElement, SolverFail
from .experiments import parse_config, run, write_csv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyheat")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one experiment from a config file")
    runp.add_argument("config", help="path to a key=value config file")
    runp.add_argument("--override", action="append", default=[],
                      metavar="KEY=VALUE", help="override a config entry")
    runp.add_argument("--out", default=None, help="output directory")
    runp.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "run":  # pragma: no cover
        return 2
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
        config = parse_config(text)
        for item in args.override:
            if "=" not in item:
                raise ConfigError(f"bad override {item!r}")
            key, val = item.split("=", 1)
            from .experiments import config_from_dict
            from dataclasses import fields
            values = {key.strip(): val.strip()}
            base = {f.name: getattr(config, f.name)
                    for f in fields(type(config))}
            base_str = {k: v for k, v in base.items() if v is not None}
            base_str.update(values)
            config = config_from_dict({k: str(v) for k, v in base_str.items()})
    except (OSError, ConfigError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        result = run(config, quiet=args.quiet)
    except (SolverFail, FoldedElement) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3

    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, config.out)
    write_csv(result, out_path)
    stem = os.path.splitext(out_path)[0]
    for idx, (t, text) in enumerate(result.meshes):
        with open(f"{stem}_mesh_{idx:03d}.txt", "w", encoding="utf-8") as fh:
            fh.write(f"# t = {t:.12g}\n" + text)
    if not args.quiet:
        print(f"wrote {out_path}")
        print(f"final est_LinfL2 {result.est_linf_l2:.6g} "
              f"est_L2H1 {result.est_l2_h1:.6g}")
        if result.err_linf_l2 == result.err_linf_l2:  # not NaN
            print(f"final err_LinfL2 {result.err_linf_l2:.6g} "
                  f"eff_LinfL2 {result.eff_linf_l2:.4g} "
                  f"err_L2H1 {result.err_l2_h1:.6g} "
                  f"eff_L2H1 {result.eff_l2_h1:.4g}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
