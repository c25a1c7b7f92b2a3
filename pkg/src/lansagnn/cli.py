"""Command-line entry point.

    lansagnn <stage> --config run.toml --run-dir out/run1 [--seed N] [--key=value ...]
    lansagnn all    --config run.toml --run-dir out/run1
    lansagnn sweep  --config run.toml --run-dir out/sweep --axis k --values 1,3,inf

Any config field can be overridden with a dotted --key=value flag, e.g.
--pipeline.k=3 or --backends.extract.kind=fixed_text; flags win over the
file. Exit codes: 0 ok, 2 config error, 3 missing upstream stage, 4 backend
exhausted, 5 completed with per-record gaps (see the failures manifests).
"""

from __future__ import annotations

import argparse
import re
import sys

from .config import load_config
from .errors import (
    BackendError,
    ConfigError,
    DataError,
    LansagnnError,
    UpstreamError,
)
from .pipeline import STAGES, run_all, run_stage, sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UPSTREAM = 3
EXIT_BACKEND = 4
EXIT_PARTIAL = 5

_OVERRIDE_RE = re.compile(r"^--([a-zA-Z0-9_.]+)=(.*)$", re.DOTALL)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lansagnn",
        description="Anisotropic language-message graph pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES + ("all",):
        p = sub.add_parser(stage, help=f"run the {stage} stage" if stage != "all" else "run every stage in order")
        _common_args(p)
    p_sweep = sub.add_parser("sweep", help="run the full pipeline over an axis of values")
    _common_args(p_sweep)
    p_sweep.add_argument("--axis", choices=("k", "oef"), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values; k accepts 'inf'")
    return parser


def _common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--run-dir", required=True, help="run directory for stage artifacts")
    p.add_argument("--seed", type=int, default=None, help="override pipeline.base_seed")


def split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull --dotted.key=value tokens out of argv before argparse sees them."""
    known_flags = {"--config", "--run-dir", "--seed", "--axis", "--values"}
    plain, overrides = [], {}
    for token in argv:
        m = _OVERRIDE_RE.match(token)
        if m and "." in m.group(1) and f"--{m.group(1)}" not in known_flags:
            overrides[m.group(1)] = m.group(2)
        else:
            plain.append(token)
    return plain, overrides


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    plain, overrides = split_overrides(argv)
    args = build_parser().parse_args(plain)
    if args.seed is not None:
        overrides["pipeline.base_seed"] = str(args.seed)

    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "all":
            result = run_all(cfg, args.run_dir)
            for outcome in result.outcomes:
                print(f"{outcome.name}: {outcome.status}")
            if result.report is not None:
                from .gnn import format_accuracy

                print(f"accuracy: {format_accuracy(result.report.mean, result.report.std)}")
            if result.total_failures:
                print(
                    f"completed with {result.total_failures} per-record failures "
                    "(see *_failures.json)",
                    file=sys.stderr,
                )
                return EXIT_PARTIAL
            return EXIT_OK
        if args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            results = sweep(cfg, args.axis, values, args.run_dir)
            from .pipeline import render_sweep_table

            print(render_sweep_table(args.axis, results), end="")
            if any(r["failures"] for r in results):
                return EXIT_PARTIAL
            return EXIT_OK
        outcome = run_stage(args.command, cfg, args.run_dir)
        print(f"{outcome.name}: {outcome.status}")
        if outcome.failures:
            print(f"{outcome.failures} per-record failures", file=sys.stderr)
            return EXIT_PARTIAL
        return EXIT_OK
    except UpstreamError as e:
        print(f"missing upstream: {e}", file=sys.stderr)
        return EXIT_UPSTREAM
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as e:
        print(f"backend exhausted: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LansagnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
