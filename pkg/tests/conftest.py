import numpy as np
import pytest

from src.cohort import CohortConfig, generate_cohort, split_patients
from src.training import LmtConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cohort_config():
    return CohortConfig(n_patients=60, feature_dim=8, max_visits=4)


@pytest.fixture
def tiny_cohort(tiny_cohort_config):
    cohort = generate_cohort(tiny_cohort_config, seed=7)
    return split_patients(cohort, (0.6, 0.2, 0.2), seed=7)


@pytest.fixture
def tiny_lmt_config():
    return LmtConfig(widths=(16, 16, 8, 8), node_hidden=8, epochs=1, batch_size=16,
                     probe_epochs=2, seed=3, task="mild+")


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    path = tmp_path / "runs"
    monkeypatch.setenv("LMT_OUTPUT_DIR", str(path))
    return path


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar function of an array, in place over ``x``."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + eps
        plus = f()
        x[idx] = original - eps
        minus = f()
        x[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))
