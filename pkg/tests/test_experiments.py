import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from src.config import resolve_config
from src.diffcore import save_checkpoint
from src.errors import UsageError
from src.experiments import (
    RESULT_COLUMNS, RUNNERS, Job, ResultsRow, beta_density_rows, build_jobs, load_model, read_results, run_job, run_jobs,
    select_best, write_results,
)
from src.run_manager import RunManager
from src.training import LmtModel
from src.utils import make_rng


def test_write_results_format(tmp_path):
    path = tmp_path / "results.csv"
    rows = [ResultsRow("lmm", "-", "-", 2.0, "linear", 1, "kappa", 0.7511),
            ResultsRow("erm", "-", "-", 2.0, "linear", 2, "failed", math.nan)]
    write_results(rows, path)
    text = path.read_bytes().decode("utf-8")
    assert "\r" not in text
    lines = text.splitlines()
    assert lines[0] == ",".join(RESULT_COLUMNS)
    assert lines[1] == "lmm,-,-,2.000000,linear,1,kappa,0.751100,0.000000"
    assert lines[2].endswith("failed,nan,0.000000")
    back = read_results(path)
    assert back[0] == rows[0]
    assert back[1].metric == "failed" and math.isnan(back[1].value)


def test_write_results_to_missing_directory_is_an_io_error(tmp_path):
    with pytest.raises(OSError):
        write_results([], tmp_path / "missing" / "results.csv")


def test_build_jobs_grid_sizes():
    config = resolve_config(overrides={"seeds": "1,2"})
    assert len(build_jobs("sweep-alpha", config)) == 7 * 2
    assert len(build_jobs("train", config)) == 2
    tables = [job.table for job in build_jobs("reproduce-tables", config)]
    assert tables == sorted(tables, key=["table1", "table2", "table3", "fig3"].index)
    # erm has no alpha; the other eight rows search 7 alphas x 3 learning rates
    assert tables.count("table1") == (3 + 8 * 7 * 3) * 2
    assert tables.count("table2") == 3 * 2
    # S1 rows search learning rates only
    assert tables.count("table3") == (2 * 3 + 3 * 7 * 3) * 2
    assert tables.count("fig3") == 2 * 2 * 7 * 2
    assert build_jobs("train", resolve_config(overrides={"seeds": ""})) == []
    with pytest.raises(UsageError):
        build_jobs("plot", config)


def test_job_run_ids_are_deterministic():
    job = Job("sweep-alpha", "lmm_linear_a0.5", "grading", 3, {"alpha": 0.5})
    assert job.run_id == "sweep-alpha_lmm_linear_a0.5_seed3"


def test_load_model_infers_the_time_model(tmp_path, tiny_lmt_config):
    for kind in ("node", "tlstm"):
        model = LmtModel(8, replace(tiny_lmt_config, model=kind), make_rng(0))
        path = tmp_path / f"{kind}.ckpt"
        save_checkpoint(model.named_parameters(), path)
        loaded, lmt = load_model(path, 8, tiny_lmt_config)
        assert lmt.model == kind
        assert list(loaded.named_parameters()) == list(model.named_parameters())


def test_failed_job_yields_a_failed_row(tmp_path, tiny_cohort):
    config = resolve_config(overrides={"seeds": "1"})
    manager = RunManager(str(tmp_path))
    job = Job("evaluate", "checkpoint", "evaluate", 1)
    rows, error = run_job(job, config, tiny_cohort, manager)
    assert isinstance(error, UsageError)
    assert [r.metric for r in rows] == ["failed"] and math.isnan(rows[0].value)
    assert manager.load_run(job.run_id)["status"] == "failed"

    other = Job("evaluate", "checkpoint", "evaluate", 2)
    outcome = run_jobs([job, other], config, tiny_cohort, manager, threads=2)
    assert len(outcome.rows) == 2 and len(outcome.failures) == 2
    assert run_jobs([], config, tiny_cohort, manager).rows == []


def test_table_rows_search_alpha_and_learning_rate():
    config = resolve_config(overrides={"seeds": "1", "alphas": "0.5,2", "learning_rates": "0.01,0.001"})
    jobs = build_jobs("reproduce-tables", config)
    lmm = [job for job in jobs if job.group == "lmm_longitudinal_linear"]
    assert [(j.overrides["alpha"], j.overrides["max_lr"]) for j in lmm] == [
        (0.5, 0.01), (0.5, 0.001), (2.0, 0.01), (2.0, 0.001)]
    assert lmm[0].name == "lmm_longitudinal_linear_a0.5_lr0.01"
    assert len([job for job in jobs if job.group == "S1_node"]) == 2
    table2 = [job for job in jobs if job.table == "table2"]
    assert [job.overrides["method"] for job in table2] == ["random", "manifold_mixup", "lmm"]
    assert table2[1].overrides["pairing"] == "random"


def grid_rows(name, alpha, val_loss, kappa):
    rows = [ResultsRow(name, "-", "-", alpha, "linear", 1, "kappa", kappa)]
    if val_loss is not None:
        rows.append(ResultsRow(name, "-", "-", alpha, "linear", 1, "val_loss", val_loss))
    return rows


def test_select_best_keeps_the_lowest_validation_loss():
    jobs = [
        Job("reproduce-tables", "lm_a0.5_lr0.01", "grading", 1, {"alpha": 0.5, "max_lr": 0.01}, "table1", "lm"),
        Job("reproduce-tables", "lm_a2.0_lr0.001", "grading", 1, {"alpha": 2.0, "max_lr": 0.001}, "table1", "lm"),
        Job("reproduce-tables", "lm_a5.0_lr0.01", "grading", 1, {"alpha": 5.0, "max_lr": 0.01}, "table1", "lm"),
        Job("reproduce-tables", "erm_lr0.01", "grading", 1, {"max_lr": 0.01}, "table1", "erm"),
        Job("reproduce-tables", "sweep", "grading", 1, {}, "fig3"),
    ]
    job_rows = [
        grid_rows("lm", 0.5, 0.9, 0.60),
        grid_rows("lm", 2.0, 0.4, 0.55),
        [ResultsRow("lm", "-", "-", 5.0, "linear", 1, "failed", math.nan)],
        [ResultsRow("erm", "-", "-", 2.0, "linear", 1, "failed", math.nan)],
        grid_rows("lm", 2.0, None, 0.5),
    ]
    tables = select_best(jobs, job_rows)
    assert list(tables) == ["table1"]
    chosen = tables["table1"]
    assert [(r.method, r.alpha, r.metric) for r in chosen] == [
        ("lm", 2.0, "kappa"), ("lm", 2.0, "val_loss"), ("lm", 2.0, "max_lr"),
        ("erm", 2.0, "failed"), ("erm", 2.0, "max_lr"),
    ]
    assert chosen[2].value == 0.001 and chosen[0].value == 0.55


def test_beta_density_rows():
    rows = beta_density_rows((0.5, 1.0, 2.0))
    assert len(rows) == 3 * 99
    assert rows[0].metric == "pdf_0.01" and rows[98].metric == "pdf_0.99"
    uniform = [r.value for r in rows if r.alpha == 1.0]
    np.testing.assert_allclose(uniform, 1.0)
    for alpha in (0.5, 2.0):
        values = np.array([r.value for r in rows if r.alpha == alpha])
        np.testing.assert_allclose(values, values[::-1], rtol=1e-12)
        assert integrate.trapezoid(values, dx=0.01) == pytest.approx(1.0, abs=0.05 if alpha == 2.0 else 0.25)


def test_unexpected_errors_fail_the_run(tmp_path, tiny_cohort, monkeypatch):
    def broken(job, job_config, cohort, manager):
        raise RuntimeError("disk full")

    monkeypatch.setitem(RUNNERS, "evaluate", broken)
    manager = RunManager(str(tmp_path))
    job = Job("evaluate", "checkpoint", "evaluate", 1)
    rows, error = run_job(job, resolve_config(overrides={"seeds": "1"}), tiny_cohort, manager)
    assert isinstance(error, RuntimeError)
    assert [r.metric for r in rows] == ["failed"]
    state = manager.load_run(job.run_id)
    assert state["status"] == "failed" and "disk full" in state["error"]
