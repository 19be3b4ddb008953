"""``calfplay`` command line: one subcommand per pipeline stage.

Exit status is 0 on success, 2 for bad input or a missing upstream stage,
and 1 for anything unexpected.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys

from . import __version__
from .errors import CalfplayError
from .pipeline import COMMANDS, OUTPUT_ENV, STAGES, PipelineConfig

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calfplay",
        description="Calf play-behaviour pipeline: event logs and frame metadata to labelled "
                    "datasets, a trained classifier and welfare statistics.",
    )
    parser.add_argument("--version", action="version", version=f"calfplay {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("-i", "--input", help="input directory (paths.input)")
    common.add_argument("-o", "--output", help=f"output directory (paths.output; env {OUTPUT_ENV})")
    common.add_argument("--seed", type=int, help="seed for both prepare and train")
    common.add_argument("--jobs", type=int, default=1, help="worker cap for file loading (default 1)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise CalfplayError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    if args.input is not None:
        out["paths.input"] = args.input
    if args.output is not None:
        out["paths.output"] = args.output
    if args.seed is not None:
        out["prepare.seed"] = str(args.seed)
        out["train.seed"] = str(args.seed)
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise CalfplayError("--jobs must be at least 1")
        cfg = PipelineConfig.load(args.config, _overrides(args))
        cfg.jobs = args.jobs
        result = COMMANDS[args.command](cfg)
    except (CalfplayError, configparser.Error, FileNotFoundError) as exc:
        print(f"calfplay {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("calfplay").exception("internal error")
        print(f"calfplay {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    summary = {k: v for k, v in result.items() if k != "provenance" and not isinstance(v, (list, dict))}
    print(f"calfplay {args.command}: ok " + json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
