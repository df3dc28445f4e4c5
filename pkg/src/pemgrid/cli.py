"""Command line: ``pemgrid run|validate|compare``.

Exit codes: 0 ok, 1 bad configuration, 2 the simulation went unstable or
the MPC solver gave up.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .dynamics import UnstableStep
from .mpc import SolverFailure

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_run(args) -> int:
    script = harness.load_scenario(args.script)
    harness.validate_scenario(script)
    trace = harness.run_scenario(script, seed=args.seed, debug_dir=args.debug_dumps,
                                 event_log=args.event_log)
    csv_out = args.csv_out or f"{script.name}.csv"
    for p in harness.export(trace, csv_out, args.svg):
        print(f"wrote {p}")
    for k, v in harness.trace_metrics(trace, script.service_tol_mw).items():
        print(f"{k:24s} {_fmt(v)}")
    return EXIT_OK


def cmd_validate(args) -> int:
    script = harness.load_scenario(args.script)
    grid = harness.validate_scenario(script)
    print(f"{script.name}: ok ({script.controller}, {script.duration_s:g} s, "
          f"{grid.n_bus} buses, {len(script.events)} events)")
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = harness.SimTrace.from_csv(args.a), harness.SimTrace.from_csv(args.b)
    report = harness.compare_runs(a, b, args.tol)
    print(f"{'metric':24s} {'a':>12s} {'b':>12s} {'b - a':>12s}")
    for k, (va, vb, d) in report.items():
        print(f"{k:24s} {_fmt(va):>12s} {_fmt(vb):>12s} {_fmt(d):>12s}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pemgrid", description="Grid + VPP closed-loop simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file or bundled scenario name")
    r.add_argument("script")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--csv-out", default=None, help="trace CSV path (default <name>.csv)")
    r.add_argument("--svg", default=None, help="also write a four-panel SVG chart")
    r.add_argument("--debug-dumps", default=None, metavar="DIR",
                   help="write every MPC QP and its solution to DIR")
    r.add_argument("--event-log", default=None, help="write PEM device events (JSON lines)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("script")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("compare", help="compare the metrics of two trace CSVs")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, default=1.0, help="service tolerance, MW")
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, harness.GridMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnstableStep, SolverFailure) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
