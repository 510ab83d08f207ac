"""Experiment grid: cohort preparation, job lists per command and job execution.

A job is one (configuration, seed) cell of the grid. Jobs run independently,
each in its own run directory, and their result rows are merged in job order
so the output does not depend on scheduling.
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats

from src.cohort import export_csv, extract_pairs, generate_cohort, load_cohort, save_cohort, split_patients
from src.diffcore import load_checkpoint, save_checkpoint
from src.errors import LmtError, TrainingDiverged, UsageError
from src.run_manager import make_run_id
from src.training import (
    LmtModel, evaluate_grading, evaluate_next_visit, fine_tune, linear_probe, train_grading, train_setup,
)
from src.utils import ensure_dir, logger, make_rng

RESULT_COLUMNS = ["method", "setup", "model", "alpha", "profile", "seed", "metric", "value", "wall_s"]
COMMANDS = ("generate-data", "train", "evaluate", "probe", "sweep-alpha", "reproduce-tables")

GRADING_ROWS = (
    ("erm", "longitudinal", "linear"),
    ("mixup", "random", "linear"),
    ("manifold_mixup", "random", "linear"),
    ("mixup", "longitudinal", "linear"),
    ("manifold_mixup", "longitudinal", "linear"),
    ("lm", "longitudinal", "linear"),
    ("lm", "longitudinal", "exponential"),
    ("lmm", "longitudinal", "linear"),
    ("lmm", "longitudinal", "exponential"),
)
PROBE_ROWS = (("random", "longitudinal"), ("manifold_mixup", "random"), ("lmm", "longitudinal"))
SETUP_ROWS = (("S1", "node"), ("S1", "tlstm"), ("S2", "node"), ("S2", "tlstm"), ("S3", "node"))
SETUP_LABELS = {"S1": "next_visit", "S2": "t_mix", "S3": "lmm"}
DENSITY_POINTS = 99


@dataclass
class ResultsRow:
    method: str
    setup: str
    model: str
    alpha: float
    profile: str
    seed: int
    metric: str
    value: float
    wall_s: float = 0.0


@dataclass
class Job:
    """One grid cell: what to run (``kind``), for which seed, with which config changes.

    Jobs sharing a ``group`` are hyper-parameter candidates for one table row;
    only the best of them on validation is reported in that table.
    """
    command: str
    name: str
    kind: str
    seed: int
    overrides: dict = field(default_factory=dict)
    table: str = "results"
    group: str = ""

    @property
    def run_id(self):
        return make_run_id(self.command, self.name, self.seed)


@dataclass
class ExperimentOutcome:
    rows: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def write_results(rows, path):
    """Write result rows as CSV with the fixed header; floats use 6 decimals, LF endings.

    Raises:
        OSError: If the path cannot be written.
    """
    frame = pd.DataFrame([asdict(r) for r in rows], columns=RESULT_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.6f", na_rep="nan", lineterminator="\n", encoding="utf-8")
    return path


def read_results(path):
    """Parse a results CSV back into ResultsRow objects."""
    frame = pd.read_csv(path, dtype={"method": str, "setup": str, "model": str, "profile": str, "metric": str},
                        keep_default_na=False, na_values=["nan"])
    return [
        ResultsRow(r.method, r.setup, r.model, float(r.alpha), r.profile, int(r.seed), r.metric,
                   float(r.value), float(r.wall_s))
        for r in frame.itertuples(index=False)
    ]


def prepare_cohort(config):
    """Load the cohort named by ``cohort_path`` or generate and split a new one.

    Raises:
        OSError: If ``cohort_path`` is set but missing.
        FormatError: If the file is not a valid cohort.
    """
    if config.cohort_path:
        if not os.path.exists(config.cohort_path):
            raise FileNotFoundError(f"Cohort file not found: {config.cohort_path}")
        return load_cohort(config.cohort_path)
    cohort = generate_cohort(config.cohort_config(), config.cohort_seed)
    return split_patients(cohort, config.split_fractions, seed=config.cohort_seed)


def build_jobs(command, config):
    """Expand a command into its ordered job list."""
    jobs = []
    for seed in config.seeds:
        if command == "train":
            jobs.append(Job(command, f"{config.setup}_{config.model}", "setup", seed))
        elif command == "evaluate":
            jobs.append(Job(command, "checkpoint", "evaluate", seed))
        elif command == "probe":
            jobs.append(Job(command, f"{config.method}_{config.task}", "probe", seed))
        elif command == "sweep-alpha":
            jobs.extend(Job(command, f"{config.method}_{config.profile}_a{alpha}", "grading", seed,
                            {"alpha": alpha}, table="fig3")
                        for alpha in config.alphas)
        elif command == "reproduce-tables":
            jobs.extend(_table_jobs(config, seed))
        else:
            raise UsageError(f"Unknown command: {command}")
    if command == "reproduce-tables":
        order = {"table1": 0, "table2": 1, "table3": 2, "fig3": 3}
        jobs.sort(key=lambda j: order[j.table])
    return jobs


def _search_grid(config, uses_alpha):
    alphas = config.alphas if uses_alpha else (config.alpha,)
    return [(alpha, lr) for alpha in alphas for lr in config.learning_rates]


def _table_jobs(config, seed):
    command = "reproduce-tables"
    jobs = []
    for method, pairing, profile in GRADING_ROWS:
        row = f"{method}_{pairing}_{profile}"
        jobs += [Job(command, f"{row}_a{alpha}_lr{lr:g}", "grading", seed,
                     {"method": method, "pairing": pairing, "profile": profile, "alpha": alpha, "max_lr": lr},
                     table="table1", group=row)
                 for alpha, lr in _search_grid(config, method != "erm")]
    jobs += [Job(command, f"probe_{method}", "probe", seed, {"method": method, "pairing": pairing}, table="table2")
             for method, pairing in PROBE_ROWS]
    for setup, model in SETUP_ROWS:
        row = f"{setup}_{model}"
        jobs += [Job(command, f"{row}_a{alpha}_lr{lr:g}", "setup", seed,
                     {"setup": setup, "model": model, "alpha": alpha, "max_lr": lr}, table="table3", group=row)
                 for alpha, lr in _search_grid(config, setup != "S1")]
    jobs += [Job(command, f"sweep_{method}_{profile}_a{alpha}", "grading", seed,
                 {"method": method, "profile": profile, "alpha": alpha}, table="fig3")
             for method in ("lm", "lmm") for profile in ("linear", "exponential") for alpha in config.alphas]
    return jobs


def _method_label(job_config, kind):
    if kind == "setup":
        return SETUP_LABELS[job_config.setup]
    if kind == "grading" and job_config.pairing == "random":
        return f"{job_config.method}_random"
    return job_config.method


def _row_factory(job, job_config, kind):
    setup = job_config.setup if kind in ("setup", "evaluate") else "-"
    model = job_config.model if kind in ("setup", "evaluate") else "-"
    method = _method_label(job_config, kind)

    def make(metric, value, wall_s):
        return ResultsRow(method, setup, model, float(job_config.alpha), job_config.profile, int(job.seed),
                          metric, float(value), wall_s)

    return make


def _save_model(manager, job, model):
    path = manager.register_file(job.run_id, "checkpoint", "model.ckpt")
    save_checkpoint(model.named_parameters(), path)


def _run_setup(job, job_config, cohort, manager):
    lmt = job_config.lmt_config(job.seed)
    result = train_setup(job_config.setup, job_config.model, cohort, lmt)
    manager.write_history(job.run_id, job.name, result.history)
    _save_model(manager, job, result.model)
    return _with_selection_loss(job, result, evaluate_next_visit(result.model, cohort, lmt))


def _run_grading(job, job_config, cohort, manager):
    lmt = job_config.lmt_config(job.seed)
    result = train_grading(job_config.method, cohort, lmt)
    manager.write_history(job.run_id, job.name, result.history)
    _save_model(manager, job, result.model)
    return _with_selection_loss(job, result, {"kappa": evaluate_grading(result.model, cohort)})


def _with_selection_loss(job, result, metrics):
    if job.group:
        metrics["val_loss"] = result.best_val_loss
    return metrics


def _run_probe(job, job_config, cohort, manager):
    lmt = job_config.lmt_config(job.seed)
    feature_dim = cohort.exams()[0].features.size
    if job_config.method == "random":
        encoder = LmtModel(feature_dim, lmt, make_rng(job.seed, 10), with_time_model=False).encoder
        return {f"auc_finetune_{lmt.task}": fine_tune(encoder, cohort, lmt).auc}
    result = train_grading(job_config.method, cohort, lmt)
    manager.write_history(job.run_id, job.name, result.history)
    _save_model(manager, job, result.model)
    encoder = result.model.encoder
    return {
        f"auc_probe_{lmt.task}": linear_probe(encoder, cohort, lmt).auc,
        f"auc_finetune_{lmt.task}": fine_tune(encoder, cohort, lmt).auc,
    }


def load_model(path, feature_dim, lmt):
    """Rebuild an LmtModel from a checkpoint, inferring the time-aware model from its parameter names."""
    state = load_checkpoint(path)
    kind = next((k for k in ("node", "tlstm") if any(n.startswith(f"{k}.") for n in state)), None)
    if kind is not None:
        lmt = replace(lmt, model=kind)
    model = LmtModel(feature_dim, lmt, make_rng(lmt.seed, 10), with_time_model=kind is not None)
    model.load_state_dict(state)
    return model, lmt


def _run_evaluate(job, job_config, cohort, manager):
    if not job_config.checkpoint:
        raise UsageError("evaluate requires checkpoint=<path>")
    lmt = job_config.lmt_config(job.seed)
    model, lmt = load_model(job_config.checkpoint, cohort.exams()[0].features.size, lmt)
    metrics = {"kappa": evaluate_grading(model, cohort)}
    if model.time_model is not None:
        metrics.update(evaluate_next_visit(model, cohort, lmt))
    return metrics


RUNNERS = {"setup": _run_setup, "grading": _run_grading, "probe": _run_probe, "evaluate": _run_evaluate}


def run_job(job, config, cohort, manager):
    """Execute one job in its run directory and return ``(rows, error)``.

    Any error marks the run failed and yields a single ``failed`` row with a
    NaN value instead of propagating.
    """
    job_config = replace(config, **job.overrides, seeds=(job.seed,))
    manager.create_run(job.run_id, name=job.name, config_text=job_config.to_env_text())
    manager.set_status(job.run_id, "running")
    make_row = _row_factory(job, job_config, job.kind)
    started = time.perf_counter()
    try:
        metrics = RUNNERS[job.kind](job, job_config, cohort, manager)
    except Exception as e:
        if isinstance(e, LmtError):
            logger.error(f"Run {job.run_id} failed: {e}")
        else:
            logger.exception(f"Run {job.run_id} failed unexpectedly: {e}")
        if isinstance(e, TrainingDiverged):
            manager.write_history(job.run_id, job.name, e.history)
        manager.set_status(job.run_id, "failed", error=str(e))
        rows = [make_row("failed", math.nan, 0.0)]
        write_results(rows, manager.register_file(job.run_id, "results", "results.csv"))
        return rows, e

    wall_s = time.perf_counter() - started if job_config.report_wall_time else 0.0
    rows = [make_row(metric, value, wall_s) for metric, value in metrics.items()]
    write_results(rows, manager.register_file(job.run_id, "results", "results.csv"))
    manager.set_status(job.run_id, "completed")
    logger.info(f"Run {job.run_id} completed: " + ", ".join(f"{r.metric}={r.value:.4f}" for r in rows))
    return rows, None


def run_jobs(jobs, config, cohort, manager, threads=1):
    """Run jobs on up to ``threads`` workers and merge their rows in job order."""
    outcome = ExperimentOutcome()
    if not jobs:
        return outcome
    workers = max(1, min(int(threads), len(jobs)))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(executor.map(lambda job: run_job(job, config, cohort, manager), jobs))
    for job, (rows, error) in zip(jobs, results):
        outcome.rows.extend(rows)
        outcome.tables.setdefault(f"{job.table}_grid" if job.group else job.table, []).extend(rows)
        if error is not None:
            outcome.failures.append((job.run_id, error))
    outcome.tables.update(select_best(jobs, [rows for rows, _ in results]))
    return outcome


def select_best(jobs, job_rows):
    """Keep, per (table, group, seed), the rows of the candidate with the lowest validation loss.

    Failed candidates score +inf and ties go to the earlier job. The chosen
    learning rate is appended as a ``max_lr`` row; the chosen α is already in
    the rows' ``alpha`` column.

    Args:
        jobs (list[Job]): Jobs in grid order.
        job_rows (list[list[ResultsRow]]): Rows of each job, same order.

    Returns:
        dict[str, list[ResultsRow]]: Selected rows per table, in job order.
    """
    chosen = {}
    for index, (job, rows) in enumerate(zip(jobs, job_rows)):
        if not job.group:
            continue
        score = next((r.value for r in rows if r.metric == "val_loss"), math.nan)
        score = math.inf if math.isnan(score) else score
        key = (job.table, job.group, job.seed)
        if key not in chosen or score < chosen[key][0]:
            chosen[key] = (score, index)

    tables = {}
    for index in sorted(index for _, index in chosen.values()):
        job, rows = jobs[index], job_rows[index]
        lr_row = replace(rows[0], metric="max_lr", value=float(job.overrides.get("max_lr", math.nan)), wall_s=0.0)
        tables.setdefault(job.table, []).extend([*rows, lr_row])
    return tables


def beta_density_rows(alphas, n_points=DENSITY_POINTS):
    """Beta(α, α) density at ``λ = k/(n_points + 1)``, one row per (α, λ).

    The endpoints are left out since the density is unbounded there for α < 1.
    """
    lams = np.arange(1, n_points + 1) / (n_points + 1)
    rows = []
    for alpha in alphas:
        density = stats.beta.pdf(lams, alpha, alpha)
        rows.extend(ResultsRow("beta_pdf", "-", "-", float(alpha), "-", 0, f"pdf_{lam:.2f}", float(p), 0.0)
                    for lam, p in zip(lams, density))
    return rows


def generate_data(config, manager):
    """Generate, split and persist a cohort; report its size as result rows."""
    run_id = make_run_id("generate-data", "cohort", config.cohort_seed)
    run_dir = manager.create_run(run_id, name="cohort", config_text=config.to_env_text())
    cohort = split_patients(generate_cohort(config.cohort_config(), config.cohort_seed),
                            config.split_fractions, seed=config.cohort_seed)
    path = config.cohort_path or os.path.join(run_dir, "cohort.lmtcoh")
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    save_cohort(cohort, path)
    export_csv(cohort, manager.register_file(run_id, "cohort_csv", "cohort.csv"))
    if not config.cohort_path:
        manager.register_file(run_id, "cohort", "cohort.lmtcoh")

    def row(metric, value):
        return ResultsRow("generate", "-", "-", 0.0, "-", config.cohort_seed, metric, float(value), 0.0)

    rows = [
        row("n_patients", len(cohort.patients)),
        row("n_eyes", len(cohort.eyes())),
        row("n_exams", len(cohort.exams())),
        *[row(f"n_pairs_{split}", len(extract_pairs(cohort, split))) for split in ("train", "val", "test")],
    ]
    write_results(rows, manager.register_file(run_id, "results", "results.csv"))
    manager.set_status(run_id, "completed")
    return ExperimentOutcome(rows=rows, tables={"results": rows})
