"""Command-line front end: simulate, validate, demo.

Failures print one JSON line to stderr and exit with a stable code:
2 for scenario problems, 3 for a mid-run invariant breach, 4 for I/O.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import logging
import os
import sys
from typing import Optional

from .metrics import emit_metrics
from .runner import InvariantViolation, run_scenario
from .scenario import ParseError, Scenario, ValidationError, load_scenario

log = logging.getLogger("hdpsim")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INVARIANT = 3
EXIT_IO = 4


def _configure_logging() -> None:
    level = os.environ.get("SIM_LOG_LEVEL", "warn").lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if level not in _LOG_LEVELS:
        log.warning("SIM_LOG_LEVEL=%r not recognized; using warn", level)


def _fail(exc: Exception, code: int) -> int:
    print(
        json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
        file=sys.stderr,
    )
    return code


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _write_outputs(
    trace_path: str, trace_text: str, metrics_path: str, report
) -> None:
    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(trace_text)
    emit_metrics(report, metrics_path)


def _cmd_simulate(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except (ParseError, ValidationError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    return _simulate(scenario, args.seed, args.until, args.trace, args.metrics)


def _simulate(
    scenario: Scenario,
    seed: int,
    until_us: Optional[int],
    trace_path: str,
    metrics_path: str,
) -> int:
    log.info("running scenario %s with seed %d", scenario.name, seed)
    try:
        trace, report = run_scenario(scenario, seed, until_us)
    except InvariantViolation as exc:
        return _fail(exc, EXIT_INVARIANT)
    try:
        _write_outputs(trace_path, trace.to_jsonl(), metrics_path, report)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    log.info("trace sha256 %s", trace.sha256())
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except (ParseError, ValidationError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    print(f"ok: {scenario.name} ({len(scenario.devices)} devices, {len(scenario.timeline)} actions)")
    return EXIT_OK


def demo_scenario(name: str = "pulsemeter") -> Scenario:
    resource = importlib.resources.files("hdpsim") / "scenarios" / f"{name}.json"
    with importlib.resources.as_file(resource) as path:
        return load_scenario(str(path))


def _cmd_demo(args: argparse.Namespace) -> int:
    try:
        scenario = demo_scenario(args.name)
    except (ParseError, ValidationError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    return _simulate(
        scenario,
        args.seed,
        None,
        f"{args.name}_trace.jsonl",
        f"{args.name}_metrics.json",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdpsim",
        description="Deterministic simulator for short-range medical device networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario and write trace/metrics")
    sim.add_argument("--scenario", required=True, help="scenario JSON file")
    sim.add_argument("--seed", required=True, type=_seed, help="unsigned 64-bit seed")
    sim.add_argument("--until", type=int, default=None, help="stop time in microseconds")
    sim.add_argument("--trace", required=True, help="output trace path (JSONL)")
    sim.add_argument("--metrics", required=True, help="output metrics path (JSON)")
    sim.set_defaults(func=_cmd_simulate)

    val = sub.add_parser("validate", help="check a scenario file without running it")
    val.add_argument("--scenario", required=True, help="scenario JSON file")
    val.set_defaults(func=_cmd_validate)

    demo = sub.add_parser("demo", help="run a packaged demo scenario")
    demo.add_argument("name", choices=["pulsemeter"], help="demo to run")
    demo.add_argument("--seed", type=_seed, default=42, help="unsigned 64-bit seed")
    demo.set_defaults(func=_cmd_demo)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
