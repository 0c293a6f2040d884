"""Command line: ``mgi run --config PATH`` and ``mgi report --in DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mgi import ConsistencyError
from mgi.config import ConfigError, load_config, parse_grid
from mgi.images import ImageFormatError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("mgi")


def _run(args) -> int:
    from mgi.pipeline import report_text, run_pipeline
    from mgi.reduction import ReductionError

    try:
        config = load_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.grid is not None:
            changes["grid"] = parse_grid(args.grid)
        if args.no_noise:
            changes["noise"] = False
        if args.out is not None:
            changes["out_dir"] = args.out
        config = config.replace(**changes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = run_pipeline(config)
    except (ConfigError, ImageFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConsistencyError, ReductionError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(report_text(result.report), end="")
    print(f"artifacts written to {result.out_dir}", file=sys.stderr)
    return EXIT_OK


def _report(args) -> int:
    from mgi.pipeline import report_text

    path = Path(args.input) / "report.json"
    try:
        report = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        print(f"cannot read report: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(report_text(report), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgi", description="Multiplexed ghost imaging simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate acquisition and reconstruct")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--grid", help="override grid, e.g. 32x32")
    run.add_argument("--no-noise", action="store_true")
    run.add_argument("--out", help="output directory")
    run.set_defaults(func=_run)

    rep = sub.add_parser("report", help="print the SNR report of a finished run")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(func=_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
