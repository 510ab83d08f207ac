"""Command-line experiment runner.

Usage:
    python -m src.cli generate-data [--config FILE] [--set key=value ...]
    python -m src.cli train --config experiment.env --set seeds=1,2,3
    python -m src.cli reproduce-tables --set n_patients=500 --set epochs=5

Exit codes: 0 success, 1 unexpected error, 2 usage error, 3 numeric failure,
4 I/O or format error.
"""

import argparse
import os
import sys

from dotenv import load_dotenv

from src.config import parse_overrides, resolve_config
from src.errors import ContractError, FormatError, NumericFailure, UsageError
from src.experiments import (
    COMMANDS, ExperimentOutcome, beta_density_rows, build_jobs, generate_data, prepare_cohort, run_jobs,
    write_results,
)
from src.run_manager import RunManager
from src.utils import ensure_dir, logger

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def exit_code_for(error):
    """Map an exception to the process exit code."""
    if isinstance(error, NumericFailure):
        return EXIT_NUMERIC
    if isinstance(error, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(error, (UsageError, ContractError)):
        return EXIT_USAGE
    return EXIT_FAILURE


def run_experiment(command, config, manager=None):
    """Run ``command`` over the configured grid and return its outcome.

    Generates or loads the cohort, expands the command into jobs (one per
    configuration cell and seed), runs them on up to ``LMT_THREADS`` workers
    and merges the rows in deterministic job order. An empty seed list yields
    no rows.

    Args:
        command (str): One of COMMANDS.
        config (ExperimentConfig): Resolved configuration.
        manager (RunManager, optional): Output location; defaults to
            ``config.output_dir``.

    Returns:
        ExperimentOutcome: Rows, per-table rows and failed runs.
    """
    if command not in COMMANDS:
        raise UsageError(f"Unknown command: {command}")
    manager = manager or RunManager(config.output_dir)
    if command == "generate-data":
        return generate_data(config, manager)

    jobs = build_jobs(command, config)
    if not jobs:
        logger.info(f"{command}: no seeds configured, nothing to run")
        return ExperimentOutcome()
    cohort = prepare_cohort(config)
    threads = int(os.getenv("LMT_THREADS", "1"))
    logger.info(f"{command}: {len(jobs)} runs on {min(threads, len(jobs))} worker(s)")
    outcome = run_jobs(jobs, config, cohort, manager, threads=threads)
    if command == "reproduce-tables":
        outcome.tables["fig4"] = beta_density_rows(config.alphas)
        outcome.rows.extend(outcome.tables["fig4"])
    return outcome


def build_parser():
    parser = argparse.ArgumentParser(prog="lmt", description="Longitudinal mix-up training experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key (repeatable)")
        p.add_argument("--results", help="results CSV path (default <output_dir>/<command>.csv)")
    return parser


def main(argv=None):
    """CLI entry point; returns the process exit code."""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        config = resolve_config(args.config, parse_overrides(args.overrides))
        outcome = run_experiment(args.command, config)
        ensure_dir(config.output_dir)
        results_path = args.results or os.path.join(config.output_dir, f"{args.command}.csv")
        write_results(outcome.rows, results_path)
        if args.command == "reproduce-tables":
            for table, rows in outcome.tables.items():
                write_results(rows, os.path.join(config.output_dir, f"{table}.csv"))
        logger.info(f"Results written to {results_path} ({len(outcome.rows)} rows)")
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_FAILURE:
            logger.exception(f"{args.command} failed unexpectedly: {e}")
        else:
            logger.error(f"{args.command} failed: {e}")
        return code

    if outcome.failures:
        for run_id, error in outcome.failures:
            logger.error(f"Failed run {run_id}: {error}")
        return max(exit_code_for(error) for _, error in outcome.failures)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
