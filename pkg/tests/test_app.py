import math

from streamlit.testing.v1 import AppTest

from src.experiments import ResultsRow, write_results
from src.run_manager import RunManager

APP = "../app.py"


def make_run(runs_dir, run_id="train_S3_node_seed1"):
    manager = RunManager(str(runs_dir))
    manager.create_run(run_id, name="S3_node", config_text="alpha=2.0\nepochs=1\n")
    rows = [ResultsRow("lmm", "S3", "node", 2.0, "linear", 1, "kappa_next", 0.5)]
    write_results(rows, manager.register_file(run_id, "results", "results.csv"))
    manager.write_history(run_id, "S3_node", [
        {"epoch": 1, "train_loss": 1.2, "val_loss": 1.1, "lr": 1e-3, "wall_ms": 0.0},
    ])
    manager.set_status(run_id, "completed")
    return manager


def test_empty_run_list(runs_dir):
    at = AppTest.from_file(APP, default_timeout=30).run()
    assert not at.exception
    assert any("No runs yet" in info.value for info in at.info)


def test_select_run_shows_its_tables(runs_dir):
    make_run(runs_dir)
    at = AppTest.from_file(APP, default_timeout=30).run()
    at.button(key="load_train_S3_node_seed1").click().run()
    assert not at.exception
    assert "S3_node" in at.header[0].value
    assert len(at.dataframe) >= 2
    assert at.dataframe[0].value["metric"].tolist() == ["kappa_next"]


def test_failed_run_shows_its_error(runs_dir):
    manager = make_run(runs_dir, "train_S1_node_seed1")
    manager.set_status("train_S1_node_seed1", "failed", error="Non-finite S1 loss")
    write_results([ResultsRow("next_visit", "S1", "node", 2.0, "linear", 1, "failed", math.nan)],
                  manager.get_file("train_S1_node_seed1", "results"))
    at = AppTest.from_file(APP, default_timeout=30).run()
    at.button(key="load_train_S1_node_seed1").click().run()
    assert any("Non-finite S1 loss" in error.value for error in at.error)


def test_delete_run(runs_dir):
    make_run(runs_dir)
    at = AppTest.from_file(APP, default_timeout=30).run()
    at.button(key="del_train_S3_node_seed1").click().run()
    assert not at.exception
    assert RunManager(str(runs_dir)).list_runs() == []


def test_launcher_command_is_headless():
    from run import build_command

    cmd = build_command("/srv/lmt/app.py")
    assert cmd[1:5] == ["-m", "streamlit", "run", "/srv/lmt/app.py"]
    assert "--server.headless=true" in cmd
