"""``radq`` command line: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 ok, 2 configuration error, 3 missing input, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, RunConfig, from_dict, load_config, with_seed
from .learn.scg import ScgError
from .sequencer.discover import DiscoveryError
from .sequencer.model import ModelFormatError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = pipeline.STAGES + ("run",)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="run directory shared by all stages")
    common.add_argument("--config", help="JSON run configuration overlaid on the defaults")
    common.add_argument("--seed", type=int, help="base seed for the cohort, discovery and folds")
    common.add_argument("--profile", choices=("desk", "paper"), help="sequencer architecture profile")
    common.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    common.add_argument("--patients", type=int, help="number of synthetic patients")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="radq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(args) -> tuple[RunConfig, str | None]:
    text = None
    cfg = RunConfig()
    if args.config:
        cfg, text = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    over: dict = {}
    if args.patients is not None:
        over["phantom"] = {"n_patients": args.patients}
    if args.profile is not None:
        over["sequencer"] = {"profile": args.profile}
    if args.threads is not None:
        over["threads"] = args.threads
    if over:
        cfg = from_dict(over, base=cfg)
    return cfg, text


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg, text = resolve_config(args)
    except FileNotFoundError as exc:
        print(f"radq: config file not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ValueError) as exc:
        print(f"radq: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            pipeline.run_all(cfg, args.out, text)
        else:
            pipeline.run_stage(cfg, args.out, args.command, text)
    except pipeline.MissingInputError as exc:
        print(f"radq {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DiscoveryError, ScgError, FloatingPointError) as exc:
        print(f"radq {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ModelFormatError as exc:
        print(f"radq {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
