"""Command-line entry point: ``oddm-ce {run,converge,random-ref,angles,validate-config}``.

Exit codes: 0 on success, 2 on a configuration error, 3 when MAMP diverges.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .channel import ChannelError
from .mamp import MampDivergenceError
from .modem import DimensionError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

COMMANDS = {
    "run": (harness.run_experiment, harness.RUN_HEADER),
    "converge": (harness.convergence_trace, harness.CONVERGE_HEADER),
    "random-ref": (harness.random_matrix_reference, harness.RANDOM_REF_HEADER),
    "angles": (harness.angle_experiment, harness.ANGLES_HEADER),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oddm-ce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "validate-config"]:
        p = sub.add_parser(name)
        p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--preset", choices=sorted(harness.PRESETS), default="desk")
        if name != "validate-config":
            p.add_argument("--out", metavar="PATH", help="CSV destination (default: stdout)")
            p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config, preset=args.preset)
        if args.command == "validate-config":
            sys.stdout.write(harness.config_to_text(cfg))
            return EXIT_OK
        if args.workers < 1:
            raise harness.ConfigError("--workers must be at least 1")
        fn, header = COMMANDS[args.command]
        rows = fn(cfg, workers=args.workers)
    except (harness.ConfigError, ChannelError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MampDivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    harness.write_csv(rows, header, args.out if args.out else sys.stdout)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
