"""Severity-interpolation profiles and time normalization.

Times are expressed in normalized units (days / 730) everywhere in the
framework, including ODE horizons. A profile ``I(t)`` interpolates the ICDR
grade between two consecutive exams of the same eye.
"""

import numpy as np

from src.errors import ContractError

DAYS_PER_UNIT = 730.0
NUM_GRADES = 5
MAX_GRADE = NUM_GRADES - 1

PROFILES = ("linear", "exponential", "exponential_literal")


def normalize_time(days):
    """Convert days since the first exam to normalized time units.

    Args:
        days (float): Non-negative elapsed days.

    Returns:
        float: ``days / 730``.

    Raises:
        ContractError: If ``days`` is negative.

    Examples:
        >>> normalize_time(365)
        0.5
    """
    if days < 0:
        raise ContractError(f"normalize_time: negative days {days}")
    return days / DAYS_PER_UNIT


def check_grade(grade):
    """Validate an ICDR grade and return it as an int."""
    if not 0 <= grade <= MAX_GRADE or int(grade) != grade:
        raise ContractError(f"Severity grade must be an integer in [0, {MAX_GRADE}], got {grade}")
    return int(grade)


def interpolate_severity(profile, s_i, s_ip1, t_i, t_ip1, t):
    """Evaluate the severity profile ``I(t)`` between two consecutive exams.

    ``linear``:
        ``s_i + frac·(s_ip1 − s_i)`` with ``frac = (t − t_i)/(t_ip1 − t_i)``.
    ``exponential``:
        geometric interpolation on ``grade + 1`` so that grade 0 is allowed:
        ``(s_i + 1)·((s_ip1 + 1)/(s_i + 1))**frac − 1``.
    ``exponential_literal``:
        ``s_i·(s_ip1/s_i)**frac``; undefined when either grade is 0.

    Both endpoints are returned exactly.

    Raises:
        ContractError: If ``t_i >= t_ip1``, ``t`` lies outside ``[t_i, t_ip1]``,
            a grade is invalid, or the literal profile meets grade 0.
    """
    s_i, s_ip1 = check_grade(s_i), check_grade(s_ip1)
    if not t_i < t_ip1:
        raise ContractError(f"interpolate_severity: t_i={t_i} must be < t_ip1={t_ip1}")
    if not t_i <= t <= t_ip1:
        raise ContractError(f"interpolate_severity: t={t} outside [{t_i}, {t_ip1}]")

    frac = (t - t_i) / (t_ip1 - t_i)
    if frac == 0.0:
        return float(s_i)
    if frac == 1.0:
        return float(s_ip1)

    if profile == "linear":
        return s_i + frac * (s_ip1 - s_i)
    if profile == "exponential":
        return (s_i + 1) * ((s_ip1 + 1) / (s_i + 1)) ** frac - 1.0
    if profile == "exponential_literal":
        if s_i == 0 or s_ip1 == 0:
            raise ContractError("exponential_literal profile is undefined for grade 0")
        return s_i * (s_ip1 / s_i) ** frac
    raise ContractError(f"Unknown severity profile: {profile}")


def interpolate_batch(profile, s_i, s_ip1, t_i, t_ip1, t):
    """Vectorized ``interpolate_severity`` over arrays of pairs."""
    return np.array([
        interpolate_severity(profile, a, b, ta, tb, tm)
        for a, b, ta, tb, tm in zip(s_i, s_ip1, t_i, t_ip1, t)
    ], dtype=np.float64)
