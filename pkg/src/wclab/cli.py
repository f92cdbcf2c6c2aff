"""Command line entry points: run, report, check."""

from __future__ import annotations

import argparse
import sys

from .checks import closed_form_vs_grid, gradient_checks, soundness_suite
from .harness import ConfigError, expand_runs, load_config, run_experiment, write_report


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="wclab",
                                     description="continual-learning experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute every run a config describes")
    p_run.add_argument("config", help="experiment config JSON (or a prior manifest.json)")
    p_run.add_argument("--jobs", type=int, default=1, metavar="N",
                       help="worker processes (default 1)")
    p_run.add_argument("--seed-override", type=int, default=None, metavar="S",
                       help="replace the config's seed list with this single seed")
    p_run.add_argument("--validate-only", action="store_true",
                       help="validate the config and exit without running")

    p_rep = sub.add_parser("report", help="summarize a finished results directory")
    p_rep.add_argument("results_dir")

    p_chk = sub.add_parser("check", help="run the built-in soundness checks")
    p_chk.add_argument("--grid", type=int, default=1000)
    p_chk.add_argument("--trials", type=int, default=1000)

    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "report":
        return _cmd_report(args)
    return _cmd_check(args)


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.seed_override is not None:
        cfg["seeds"] = [args.seed_override]
    runs = expand_runs(cfg)
    if args.validate_only:
        print(f"config OK: {len(runs)} runs -> {cfg['output_dir']}")
        return 0
    manifest = run_experiment(cfg, jobs=max(1, args.jobs))
    done = manifest["n_runs"] - len(manifest["failures"])
    print(f"{done}/{manifest['n_runs']} runs complete -> {cfg['output_dir']}")
    for failure in manifest["failures"]:
        print(f"failed: {failure['run']}: {failure['error']}", file=sys.stderr)
    return 0 if manifest["status"] == "complete" else 1


def _cmd_report(args) -> int:
    try:
        out = write_report(args.results_dir)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(out["text"], end="")
    return 0 if not out["convergence_violations"] else 1


def _cmd_check(args) -> int:
    checks = [
        ("closed-form weight vs grid argmin", lambda: closed_form_vs_grid()),
        ("regularizer soundness suite", lambda: soundness_suite(args.grid, args.trials)),
        ("gradients vs finite differences", lambda: gradient_checks()),
    ]
    failed = False
    for name, fn in checks:
        ok, detail = fn()
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed |= not ok
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
