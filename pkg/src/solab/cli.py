"""Command-line entry point.

    solab certify|density|sobolev|decay|scan --config FILE
          [--out DIR] [--threads K] [--seed N]

Exit codes: 0 success (certify: certified), 2 config/schema error,
3 budget-limited, 4 guard tripped (leakage, boundary mass, degenerate
MC, refused fit), 5 not certified.
"""

from __future__ import annotations

import argparse
import sys

from .config import SchemaError, load_config
from . import experiments

COMMANDS = {
    "certify": experiments.cmd_certify,
    "density": experiments.cmd_density,
    "sobolev": experiments.cmd_sobolev,
    "decay": experiments.cmd_decay,
    "scan": experiments.cmd_scan,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="solab",
        description="Skew-product transfer-operator laboratory: certified "
                    "transversality bounds, SRB density estimation, Sobolev "
                    "norm tracking, and correlation-decay measurement.")
    sub = parser.add_subparsers(dest="command", required=True)
    help_lines = {
        "certify": "standing inequalities + certified tau bound and margin",
        "density": "Ulam and Monte Carlo SRB density estimates + TV distance",
        "sobolev": "H^s norms of operator iterates over an s-grid",
        "decay": "correlation decay fit and theoretical rate interval",
        "scan": "certification sweep over random forcing amplitudes",
    }
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=help_lines[name])
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", default=None,
                       help="output directory (overrides config 'out')")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for the word sweeps (0 = serial)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the active command's RNG seed")
        p.set_defaults(driver=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out_override=args.out,
                          threads_override=args.threads,
                          seed_override=args.seed)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return experiments.EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return experiments.EXIT_SCHEMA
    code = args.driver(cfg)
    print(f"{args.command}: exit {code} (outputs in {cfg.out_dir})")
    return code


if __name__ == "__main__":
    sys.exit(main())
