"""``splitsmc`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import InvalidInputError
from .commands import run_experiment
from .config import COMMANDS, load_config


def parse_seeds(text):
    """``"0,2,5-7"`` -> ``[0, 2, 5, 6, 7]``."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}")
    return seeds


def build_parser():
    parser = argparse.ArgumentParser(prog="splitsmc", description="Splitting-scheme pseudolikelihoods with cSMC.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--seed", type=parse_seeds, help="seed list overriding the config, e.g. 0,1,4-6")
        p.add_argument("--out", help="output directory overriding the config")
        p.add_argument("--threads", type=int, default=1, help="worker processes across seeds")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.command != args.command:
            raise InvalidInputError(f"config {args.config} declares command {cfg.command!r}, not {args.command!r}")
        if args.seed is not None:
            cfg.seeds = args.seed
        if args.threads < 1:
            raise InvalidInputError("--threads must be at least 1")
        manifest = run_experiment(cfg, args.out, args.threads)
    except InvalidInputError as exc:
        print(f"splitsmc: error: {exc}", file=sys.stderr)
        return 2
    for seed, err in manifest["failures"].items():
        print(f"splitsmc: seed {seed} failed: {err}", file=sys.stderr)
    print(manifest["manifest"])
    if not manifest["per_seed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
