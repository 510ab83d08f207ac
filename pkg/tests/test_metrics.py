import itertools

import numpy as np
import pytest
from sklearn.metrics import cohen_kappa_score, roc_auc_score

from src.errors import ContractError, NumericFailure, UndefinedMetricError
from src.metrics import confusion_matrix, grade_from_logits, quadratic_weighted_kappa, roc_auc, roc_curve


def brute_force_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_kappa_perfect_and_reversed():
    assert quadratic_weighted_kappa([0, 1, 2, 3, 4], [0, 1, 2, 3, 4]) == 1.0
    assert quadratic_weighted_kappa([0, 1], [1, 0]) == pytest.approx(-1.0, abs=1e-12)


def test_kappa_matches_sklearn(rng):
    for _ in range(20):
        y_true = rng.integers(0, 5, size=50)
        y_pred = np.clip(y_true + rng.integers(-1, 2, size=50), 0, 4)
        expected = cohen_kappa_score(y_true, y_pred, weights="quadratic", labels=range(5))
        assert quadratic_weighted_kappa(y_true, y_pred) == pytest.approx(expected, abs=1e-12)


def test_kappa_chance_level(rng):
    y_true = rng.integers(0, 5, size=10_000)
    assert abs(quadratic_weighted_kappa(y_true, rng.permutation(y_true))) < 0.05


def test_kappa_invariant_under_sample_order(rng):
    y_true, y_pred = rng.integers(0, 5, size=40), rng.integers(0, 5, size=40)
    order = rng.permutation(40)
    assert quadratic_weighted_kappa(y_true, y_pred) == pytest.approx(
        quadratic_weighted_kappa(y_true[order], y_pred[order]), abs=1e-12)


def test_kappa_degenerate_returns_one():
    assert quadratic_weighted_kappa([2, 2, 2], [2, 2, 2]) == 1.0


@pytest.mark.parametrize("y_true, y_pred", [([1], [1]), ([0, 1], [0]), ([0, 5], [0, 1])])
def test_kappa_rejects_bad_inputs(y_true, y_pred):
    with pytest.raises(ContractError):
        quadratic_weighted_kappa(y_true, y_pred)


def test_confusion_matrix_counts():
    matrix = confusion_matrix([0, 0, 4], [0, 1, 4])
    assert matrix[0, 0] == 1 and matrix[0, 1] == 1 and matrix[4, 4] == 1
    assert matrix.sum() == 3


def test_auc_examples():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_matches_brute_force_and_sklearn(rng):
    for _ in range(100):
        scores = np.round(rng.normal(size=20), 1)
        labels = rng.integers(0, 2, size=20)
        labels[:2] = [0, 1]
        auc = roc_auc(scores, labels)
        assert auc == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)
        assert auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_auc_symmetry_and_monotone_invariance(rng):
    scores = rng.normal(size=30)
    labels = rng.integers(0, 2, size=30)
    labels[:2] = [0, 1]
    assert roc_auc(scores, labels) + roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)
    assert roc_auc(np.exp(scores), labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_curve_runs_from_origin_to_one(rng):
    scores = rng.normal(size=25)
    labels = rng.integers(0, 2, size=25)
    labels[:2] = [0, 1]
    curve = roc_curve(scores, labels)
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    area = np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0)
    assert area == pytest.approx(roc_auc(scores, labels), abs=1e-12)


def test_grade_from_logits():
    assert grade_from_logits(np.array([0, 0, 5, 0, 0])) == 2
    assert grade_from_logits(np.zeros(5)) == 0
    logits = np.array([[0.1, 2.0, 1.0, 0, 0], [3.0, 3.0, 0, 0, 0]])
    np.testing.assert_array_equal(grade_from_logits(logits), [1, 0])
    np.testing.assert_array_equal(grade_from_logits(logits + 7.5), [1, 0])
    with pytest.raises(NumericFailure):
        grade_from_logits(np.array([0, np.nan, 0, 0, 0]))
