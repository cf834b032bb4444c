"""``entroscope <command> --scenario FILE [--out FILE] [--seed N] [--workers N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import numerics
from .report import dumps
from .scenario import _COMMANDS, EXIT_INPUT, run_scenario

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="entroscope",
                                 description="Entropy-coefficient calculus and verification reports.")
    ap.add_argument("command", choices=sorted(_COMMANDS), help="verification to run")
    ap.add_argument("--scenario", required=True, help="scenario JSON file")
    ap.add_argument("--out", help="write the report here instead of standard output")
    ap.add_argument("--seed", type=int, help="override the scenario seed")
    ap.add_argument("--workers", type=int, default=1, help="parallel sampling width (never changes results)")
    ap.add_argument("-v", "--verbose", action="store_true", help="log warnings to standard error")
    return ap


def _emit(text: str, out: Optional[str]):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.scenario, encoding="utf-8") as fh:
            scenario = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"entroscope: cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if isinstance(scenario, dict) and scenario.get("command", args.command) != args.command:
        print(f"entroscope: scenario command {scenario.get('command')!r} does not match {args.command!r}",
              file=sys.stderr)
        return EXIT_INPUT
    if isinstance(scenario, dict):
        scenario.setdefault("command", args.command)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("entroscope: --seed must be a 64-bit unsigned integer", file=sys.stderr)
        return EXIT_INPUT
    with numerics.workers(args.workers):
        report, code = run_scenario(scenario, seed=args.seed)
    _emit(dumps(report), args.out)
    if code == EXIT_INPUT:
        print(f"entroscope: {report['verdicts'].get('error', 'input error')}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
