"""Command-line entry point: ``nrpos run`` and ``nrpos summarize``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    TECHNIQUES,
    ConfigError,
    load_config,
    read_results,
    run_experiment,
    summarize,
    write_results,
    write_summary,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nrpos", description="NR positioning Monte-Carlo simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--trials", type=int)
    run.add_argument("--technique", choices=TECHNIQUES)
    summ = sub.add_parser("summarize", help="summarize a results.csv")
    summ.add_argument("--in", dest="input", required=True, type=Path)
    return p


def _run(args) -> int:
    config = load_config(args.config).with_overrides(seed=args.seed, trials=args.trials, technique=args.technique)
    rows = run_experiment(config)
    args.out.mkdir(parents=True, exist_ok=True)
    write_results(rows, args.out / "results.csv")
    summary = summarize(rows)
    write_summary(summary, args.out / "summary.json")
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return EXIT_OK


def _summarize(args) -> int:
    rows = read_results(args.input)
    print(json.dumps(summarize(rows).to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args) if args.command == "run" else _summarize(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # bad field values that slipped past the config parser
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
