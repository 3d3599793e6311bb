"""Command-line entry point.

    svlv <command> --config <path> --seed <u64> --out <dir>

Commands: simulate, estimate-constants, verify-convergence,
coupling-check, decomposition-check.  Exit codes: 0 all gates pass,
2 a statistical or pathwise gate failed, 1 usage or config error.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .harness import (cmd_coupling_check, cmd_decomposition_check,
                      cmd_estimate_constants, cmd_simulate,
                      cmd_verify_convergence)

_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate-constants": cmd_estimate_constants,
    "verify-convergence": cmd_verify_convergence,
    "coupling-check": cmd_coupling_check,
    "decomposition-check": cmd_decomposition_check,
}


def _u64(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in a u64")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="svlv",
        description="Rescaled voter-perturbation experiments: simulation, "
                    "limit-constant estimation, and convergence gates.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", required=True,
                       help="TOML or JSON experiment config")
        p.add_argument("--seed", required=True, type=_u64,
                       help="master seed (u64); replicas split from it")
        p.add_argument("--out", required=True,
                       help="output directory (created if missing)")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; the contract reserves 2 for
        # gate failures and 1 for usage problems
        return 1 if exc.code else 0
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"svlv: config not found: {args.config}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"svlv: bad config: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](cfg, args.seed, args.out)
    except ConfigError as exc:
        print(f"svlv: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
