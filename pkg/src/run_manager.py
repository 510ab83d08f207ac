"""Run management for experiment outputs.

Provides persistent run storage using a directory-based structure where
each run has its own folder containing a ``state.json`` file and all
associated artifacts (resolved config, checkpoints, histories, results).
"""

import os
import json
import shutil
from datetime import datetime

import pandas as pd

from src.utils import logger, ensure_dir

RUNS_DIR = "runs"
STATUSES = ("created", "running", "completed", "failed")
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "wall_ms"]


def make_run_id(command, name, seed=None):
    """Deterministic run id from the command, a job name and the seed.

    Examples:
        >>> make_run_id("train", "S3 node", 2)
        'train_S3_node_seed2'
    """
    raw = f"{command}_{name}" if seed is None else f"{command}_{name}_seed{seed}"
    safe = "".join(c for c in raw if c.isalnum() or c in (' ', '-', '_', '.', '+')).strip().replace(' ', '_')
    return safe or "Untitled"


class RunManager:
    """File-system based manager for experiment runs.

    Each run is stored as a directory under the runs root folder, containing
    a ``state.json`` file that tracks run metadata, status and the files the
    run produced.

    Directory structure example::

        runs/
        └── train_S3_node_seed1/
            ├── state.json
            ├── config.env
            ├── model.ckpt
            ├── history_S3_node.csv
            └── results.csv

    Attributes:
        runs_dir (str): Root directory for all run folders.
    """

    def __init__(self, runs_dir=None):
        self.runs_dir = runs_dir or os.getenv("LMT_OUTPUT_DIR", RUNS_DIR)
        ensure_dir(self.runs_dir)

    def create_run(self, run_id, name=None, config_text=None):
        """Create (or reset) a run directory with an initial state file.

        Re-creating an existing run id overwrites its state in place.

        Args:
            run_id (str): Run identifier, typically from ``make_run_id``.
            name (str, optional): Human-readable name; defaults to the id.
            config_text (str, optional): Resolved configuration written to
                ``config.env``.

        Returns:
            str: The run directory.
        """
        run_dir = self.get_run_dir(run_id)
        ensure_dir(run_dir)
        state = {
            "id": run_id,
            "name": name or run_id,
            "created_at": datetime.now().strftime("%Y%m%d_%H%M%S"),
            "status": "created",
            "files": {},
            "error": None,
        }
        if config_text is not None:
            with open(os.path.join(run_dir, "config.env"), "w", encoding="utf-8", newline="\n") as f:
                f.write(config_text)
            state["files"]["config"] = "config.env"
        self.save_run_state(run_id, state)
        logger.info(f"Created run: {run_id}")
        return run_dir

    def get_run_dir(self, run_id):
        return os.path.join(self.runs_dir, run_id)

    def get_file(self, run_id, file_key):
        """Absolute path of a registered file, or None."""
        state = self.load_run(run_id)
        if not state or file_key not in state["files"]:
            return None
        return os.path.join(self.get_run_dir(run_id), state["files"][file_key])

    def save_run_state(self, run_id, state):
        state_path = os.path.join(self.get_run_dir(run_id), "state.json")
        with open(state_path, "w", encoding="utf-8") as f:
            json.dump(state, f, indent=2, ensure_ascii=False)

    def load_run(self, run_id):
        """Load a run's state from its ``state.json`` file.

        Returns:
            dict | None: The run state, or None if the state file does not exist.
        """
        state_path = os.path.join(self.get_run_dir(run_id), "state.json")
        if not os.path.exists(state_path):
            return None
        with open(state_path, "r", encoding="utf-8") as f:
            return json.load(f)

    def list_runs(self):
        """List all runs sorted by creation time (newest first)."""
        if not os.path.exists(self.runs_dir):
            return []
        runs = []
        for dirname in os.listdir(self.runs_dir):
            if os.path.isdir(os.path.join(self.runs_dir, dirname)):
                state = self.load_run(dirname)
                if state:
                    runs.append(state)
        runs.sort(key=lambda x: (x.get('created_at', ''), x.get('id', '')), reverse=True)
        return runs

    def set_status(self, run_id, status, error=None):
        """Update a run's status (one of STATUSES) and error message."""
        if status not in STATUSES:
            raise ValueError(f"Unknown run status: {status}")
        state = self.load_run(run_id)
        if state:
            state["status"] = status
            state["error"] = error
            self.save_run_state(run_id, state)

    def register_file(self, run_id, file_key, filename):
        """Record a file (relative to the run dir) under ``file_key``."""
        state = self.load_run(run_id)
        if state:
            state["files"][file_key] = filename
            self.save_run_state(run_id, state)
        return os.path.join(self.get_run_dir(run_id), filename)

    def write_history(self, run_id, name, history):
        """Write a training history as ``history_<name>.csv``."""
        filename = f"history_{name}.csv"
        path = os.path.join(self.get_run_dir(run_id), filename)
        pd.DataFrame(history, columns=HISTORY_COLUMNS).to_csv(
            path, index=False, float_format="%.6f", na_rep="nan", lineterminator="\n")
        self.register_file(run_id, f"history_{name}", filename)
        return path

    def read_table(self, run_id, file_key):
        """Load a registered CSV file as a DataFrame, or None."""
        path = self.get_file(run_id, file_key)
        if not path or not os.path.exists(path):
            return None
        return pd.read_csv(path)

    def delete_run(self, run_id):
        """Delete a run and all its files. This operation is irreversible."""
        run_dir = self.get_run_dir(run_id)
        if os.path.exists(run_dir):
            shutil.rmtree(run_dir)
            logger.info(f"Deleted run: {run_id}")
