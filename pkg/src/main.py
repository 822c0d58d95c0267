# src/main.py
import argparse
import logging
import sys
from typing import List, Optional

from src.core.config import settings, logger
from src.cli.commands import EXIT_CONFIG, cmd_flywheel_mc, cmd_sweep, cmd_validate


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qengine",
        description=f"{settings.APP_NAME}: power, fluctuations and TUR ratios of few-qubit heat engines.",
    )
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL from the environment.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key = value configuration file.")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override one configuration key (repeatable, highest precedence).")
        p.add_argument("--preset", choices=["fig2", "fig5"], help="Start from a bundled preset.")
        p.add_argument("--out", help="Output CSV path.")
        p.add_argument("--seed", type=int, help="Random seed (unsigned 64-bit).")
        p.add_argument("--jobs", type=int, help="Worker processes (default: available CPUs).")

    common(sub.add_parser("sweep", help="Parameter sweep: simulation against closed forms, one CSV per model."))
    validate = sub.add_parser("validate", help="Run the invariant suites.")
    common(validate)
    validate.add_argument("--level", choices=["quick", "full"], default="quick")
    common(sub.add_parser("flywheel-mc", help="Monte Carlo flywheel moments against the analytic oracle."))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    if args.log_level:
        logging.getLogger().setLevel(args.log_level.upper())

    shared = dict(preset=args.preset, config=args.config, overrides=args.overrides,
                  out=args.out, seed=args.seed, jobs=args.jobs)
    logger.info(f"Running '{args.command}'")
    if args.command == "sweep":
        return cmd_sweep(**shared)
    if args.command == "validate":
        return cmd_validate(level=args.level, **shared)
    return cmd_flywheel_mc(**shared)


if __name__ == "__main__":
    sys.exit(main())
