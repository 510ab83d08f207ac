"""Evaluation metrics: quadratic weighted kappa for grading, ROC AUC for progression tasks."""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from src.errors import ContractError, NumericFailure, UndefinedMetricError
from src.progression import NUM_GRADES
from src.utils import logger


@dataclass
class RocCurve:
    """ROC points from (0, 0) to (1, 1), one per distinct score threshold."""
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray


def _grades(values, num_grades, name):
    values = np.asarray(values)
    if values.ndim != 1:
        raise ContractError(f"{name} must be a 1-D grade list")
    if values.size and (np.any(values < 0) or np.any(values >= num_grades) or np.any(values != np.round(values))):
        raise ContractError(f"{name} contains grades outside 0..{num_grades - 1}")
    return values.astype(np.int64)


def confusion_matrix(y_true, y_pred, num_grades=NUM_GRADES):
    """Counts with rows = true grade, columns = predicted grade."""
    y_true = _grades(y_true, num_grades, "y_true")
    y_pred = _grades(y_pred, num_grades, "y_pred")
    if y_true.size != y_pred.size:
        raise ContractError(f"Length mismatch: {y_true.size} true vs {y_pred.size} predicted grades")
    matrix = np.zeros((num_grades, num_grades), dtype=np.int64)
    np.add.at(matrix, (y_true, y_pred), 1)
    return matrix


def quadratic_weighted_kappa(y_true, y_pred, num_grades=NUM_GRADES):
    """Quadratic weighted kappa ``1 − Σ w·O / Σ w·E``.

    ``O`` is the observed confusion matrix in proportions, ``E`` the outer
    product of its marginals and ``w_ij = (i − j)² / (G − 1)²``.

    Args:
        y_true (array-like): True grades.
        y_pred (array-like): Predicted grades.
        num_grades (int): Number of grade levels G.

    Returns:
        float: κ in [-1, 1]. 1.0 (with a warning) when the expected
            disagreement is zero, e.g. a single grade in both vectors.

    Raises:
        ContractError: On fewer than two samples, unequal lengths or grades
            out of range.
    """
    observed = confusion_matrix(y_true, y_pred, num_grades).astype(np.float64)
    n = observed.sum()
    if n < 2:
        raise ContractError("Weighted kappa needs at least two samples")
    observed /= n
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(num_grades)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (num_grades - 1) ** 2

    denominator = np.sum(weights * expected)
    if denominator == 0.0:
        logger.warning("Weighted kappa is degenerate (zero expected disagreement), returning 1.0")
        return 1.0
    return float(1.0 - np.sum(weights * observed) / denominator)


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise ContractError(f"Length mismatch: {scores.size} scores vs {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ContractError("Labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise NumericFailure("Non-finite score passed to ROC evaluation")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return scores, labels, n_pos


def roc_auc(scores, labels):
    """Area under the ROC curve via the Mann–Whitney rank sum.

    Ties contribute one half, so equal scores give exactly 0.5.

    Raises:
        UndefinedMetricError: If only one class is present.
    """
    scores, labels, n_pos = _binary(scores, labels)
    n_neg = labels.size - n_pos
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC points for every distinct score, thresholds in decreasing order."""
    scores, labels, n_pos = _binary(scores, labels)
    n_neg = labels.size - n_pos
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp = np.cumsum(labels[order])
    fp = np.cumsum(~labels[order])
    last = np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_scores.size - 1]
    return RocCurve(
        thresholds=np.r_[np.inf, sorted_scores[last]],
        tpr=np.r_[0.0, tp[last] / n_pos],
        fpr=np.r_[0.0, fp[last] / n_neg],
    )


def grade_from_logits(logits):
    """Decode grade(s) by argmax; ties resolve to the lower grade.

    Accepts one logit vector or a (rows × grades) matrix.

    Raises:
        NumericFailure: If any logit is non-finite.
    """
    values = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericFailure("Cannot decode a grade from non-finite logits")
    grades = np.argmax(values, axis=-1)
    return int(grades) if values.ndim == 1 else grades
