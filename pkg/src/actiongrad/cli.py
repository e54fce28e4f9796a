"""``actiongrad`` command line: argparse front end for :mod:`actiongrad.harness`."""

from __future__ import annotations

import argparse
import logging
import sys

from actiongrad.errors import ConfigurationError, ParseError, UsageError
from actiongrad.harness import COMMANDS, deep_merge, load_config_file, parse_override

HELP = {
    "gen-data": "generate a toy dataset as JSON-lines",
    "train-critic": "train a critic on a dataset and write a checkpoint",
    "train-policy": "train a sequence policy on a dataset and write a checkpoint",
    "eval": "evaluate a policy checkpoint, optionally with action refinement",
    "toy": "end-to-end toy comparison (bandit-v0 or stitch-v0)",
    "ablate": "sweep step size x iterations x gradient method",
    "compare": "RF vs RF+PG vs RF+AWAC vs RF+AG with one shared critic",
}

# CLI flag -> top-level config key
FLAG_KEYS = {"env": "env", "seed": "seed", "out": "out", "dataset": "dataset", "count": "count",
             "critic": "critic_path", "policy": "policy_path"}


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actiongrad", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=_seed, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--env", help="environment name (bandit-v0, stitch-v0)")
        p.add_argument("--dataset", help="dataset JSON-lines path")
        p.add_argument("--count", type=int, help="number of episodes to generate")
        p.add_argument("--critic", help="critic checkpoint path")
        p.add_argument("--policy", help="policy checkpoint path")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. policy.lr=0.001 or ag.n=20 (repeatable)")
    return parser


def config_from_args(args: argparse.Namespace) -> dict:
    raw = load_config_file(args.config) if args.config else {}
    flags = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items() if getattr(args, flag) is not None}
    return deep_merge(raw, flags, *(parse_override(o) for o in args.overrides))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](config_from_args(args))
    except (ConfigurationError, ParseError, UsageError, OSError) as exc:
        print(f"actiongrad {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for line in result.summary:
        print(line)
    for name, path in result.outputs.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
