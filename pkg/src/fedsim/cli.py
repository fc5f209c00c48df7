"""Command-line entry point: ``fedsim run | compare | validate``.

Exit codes: 0 success, 1 usage or config error, 2 execution failure,
3 aggregation precondition failure (Krum with too few clients per round).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from fedsim.aggregate import KrumPreconditionError
from fedsim.engine import ConfigError, resolve_aggregator
from fedsim.grid import compare, parse_config, run_grid

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2
EXIT_PRECONDITION = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Byzantine federated learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every cell of a config grid")
    run.add_argument("config")
    run.add_argument("--out", required=True, help="result directory")
    run.add_argument("--force", action="store_true", help="re-run cells that already have results")
    run.add_argument("--threads", type=int, default=1, help="worker processes (default: 1)")

    cmp = sub.add_parser("compare", help="Mann-Whitney U test per shared cell of two result directories")
    cmp.add_argument("a")
    cmp.add_argument("b")
    cmp.add_argument("--ignore-axis", action="append", default=[],
                     choices=["aggregator", "threat", "proportion", "non_iid_degree"],
                     help="match cells while ignoring this axis (repeatable)")
    cmp.add_argument("--json", action="store_true", help="print the report as JSON")

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config")
    return parser


def _cmd_run(args) -> int:
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    spec = parse_config(args.config)
    print(f"grid: {len(spec)} cells")
    outcome = run_grid(spec, args.out, force=args.force, threads=args.threads)
    print(f"executed {len(outcome.executed)} cells, skipped {len(outcome.skipped)}")
    for cell in outcome.precondition_failures:
        print(f"precondition failed: {cell}", file=sys.stderr)
    for cell, msg in outcome.failed.items():
        print(f"failed: {cell}: {msg}", file=sys.stderr)
    return outcome.exit_code


def _fmt_p(p) -> str:
    return "-" if p is None else f"{p:.4f}"


def _cmd_compare(args) -> int:
    report = compare(args.a, args.b, ignore_axes=args.ignore_axis)
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    if args.json:
        print(json.dumps(report, indent=2))
        return EXIT_OK
    for row in report["rows"]:
        flag = "*" if row["significant"] else " "
        print(f"{flag} {row['cell']:<48} {row['metric']:<18} "
              f"{row['median_a']:.4f} vs {row['median_b']:.4f}  U={row['u']}  p={_fmt_p(row['p_value'])}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    spec = parse_config(args.config)
    bad = []
    for cell in spec.cells():
        try:
            resolve_aggregator(cell.config)
        except KrumPreconditionError as exc:
            bad.append(cell.cell_id)
            print(f"precondition failed: {cell.cell_id}: {exc}", file=sys.stderr)
    if bad:
        return EXIT_PRECONDITION
    print(f"ok: {len(spec)} cells")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "compare": _cmd_compare, "validate": _cmd_validate}
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
