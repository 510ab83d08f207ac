import numpy as np
import pandas as pd
import pytest

from src.cohort import (
    CohortConfig, basis, export_csv, extract_pairs, generate_cohort, load_cohort, make_mixing_matrix, render_exam,
    save_cohort, split_patients, stack_pairs,
)
from src.errors import ContractError, FormatError
from src.utils import make_rng


def test_generation_is_deterministic(tiny_cohort_config):
    a = generate_cohort(tiny_cohort_config, seed=3)
    b = generate_cohort(tiny_cohort_config, seed=3)
    assert [p.patient_id for p in a.patients] == [p.patient_id for p in b.patients]
    np.testing.assert_array_equal(np.stack([e.features for e in a.exams()]),
                                  np.stack([e.features for e in b.exams()]))
    c = generate_cohort(tiny_cohort_config, seed=4)
    assert len(c.exams()) != len(a.exams()) or not np.array_equal(
        np.stack([e.features for e in a.exams()]), np.stack([e.features for e in c.exams()]))


def test_retained_eyes_change_grade_and_are_time_ordered(tiny_cohort):
    for eye in tiny_cohort.eyes():
        days = [e.days for e in eye.exams]
        assert days[0] == 0.0 and np.all(np.diff(days) > 0)
        assert len({e.grade for e in eye.exams}) >= 2
        assert 2 <= len(eye.exams) <= 4


def test_visit_gaps_respect_the_clamp(tiny_cohort, tiny_cohort_config):
    for eye in tiny_cohort.eyes():
        gaps = np.diff([e.days for e in eye.exams])
        assert np.all(gaps >= tiny_cohort_config.gap_min_days - 1e-9)
        assert np.all(gaps <= tiny_cohort_config.gap_max_days + 1e-9)


def test_grade_is_rounded_latent(tiny_cohort):
    for exam in tiny_cohort.exams():
        assert exam.grade == int(np.clip(np.rint(exam.latent), 0, 4))


def test_pair_count_is_visits_minus_one(tiny_cohort):
    pairs = extract_pairs(tiny_cohort)
    assert len(pairs) == sum(len(eye.exams) - 1 for eye in tiny_cohort.eyes())
    for pair in pairs:
        assert pair.exam_i.eye_id == pair.exam_ip1.eye_id
        assert pair.exam_i.patient_id == pair.exam_ip1.patient_id
        assert pair.exam_i.days < pair.exam_ip1.days


def test_single_visit_eyes_give_no_pairs():
    with pytest.raises(ContractError):
        CohortConfig(min_visits=1, max_visits=1)


def test_split_has_no_patient_leakage(tiny_cohort):
    splits = {s: set(tiny_cohort.patient_ids(s)) for s in ("train", "val", "test")}
    assert not splits["train"] & splits["val"]
    assert not splits["train"] & splits["test"]
    assert not splits["val"] & splits["test"]
    n = len(tiny_cohort.patients)
    assert abs(len(splits["train"]) - round(0.6 * n)) <= 1
    assert sum(len(s) for s in splits.values()) == n


def test_split_fraction_validation(tiny_cohort):
    with pytest.raises(ContractError):
        split_patients(tiny_cohort, (0.5, 0.5, 0.5))


def test_zero_patients_is_an_error():
    with pytest.raises(ContractError):
        generate_cohort(CohortConfig(n_patients=0), seed=1)


def test_all_flat_trajectories_are_an_error():
    with pytest.raises(ContractError):
        generate_cohort(CohortConfig(n_patients=10, amplitude_min=0.0, amplitude_max=0.0), seed=1)


def test_regression_rate_must_be_a_probability():
    with pytest.raises(ContractError):
        CohortConfig(regression_rate=1.5)


def test_render_exam_is_noise_free_when_sigma_zero():
    config = CohortConfig(noise_sigma=0.0, feature_dim=6)
    matrix = make_mixing_matrix(config, make_rng(0))
    a = render_exam(2, 2.0, make_rng(1), config, matrix)
    b = render_exam(2, 2.0, make_rng(2), config, matrix)
    np.testing.assert_array_equal(a, b)


def test_render_exam_mean_matches_the_clean_features():
    config = CohortConfig(noise_sigma=0.5, feature_dim=8)
    matrix = make_mixing_matrix(config, make_rng(0))
    rng = make_rng(4)
    n = 4000
    renders = np.stack([render_exam(2, 2.3, rng, config, matrix) for _ in range(n)])
    clean = matrix @ basis(2.3, config.basis_degree)
    assert np.all(np.abs(renders.mean(axis=0) - clean) < 4 * config.noise_sigma / np.sqrt(n))


def test_every_grade_is_represented():
    cohort = generate_cohort(CohortConfig(n_patients=500, feature_dim=4), seed=3)
    grades = np.array([e.grade for e in cohort.exams()])
    marginals = np.bincount(grades, minlength=5) / grades.size
    assert np.all(marginals > 0.01), marginals


def test_severity_moves_features_in_a_consistent_direction():
    config = CohortConfig(noise_sigma=0.0, feature_dim=16)
    matrix = make_mixing_matrix(config, make_rng(0))
    rng = make_rng(1)
    steps = [render_exam(0, s + 0.25, rng, config, matrix) - render_exam(0, s, rng, config, matrix)
             for s in np.linspace(0.0, 3.5, 15)]
    cosines = [a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in zip(steps[:-1], steps[1:])]
    assert np.mean(cosines) > 0


def test_stack_pairs_and_swap(tiny_cohort):
    batch = stack_pairs(extract_pairs(tiny_cohort, "train"))
    assert batch.x_i.shape == batch.x_ip1.shape
    assert np.all(batch.t_i < batch.t_ip1)
    swapped = batch.swapped()
    np.testing.assert_array_equal(swapped.x_i, batch.x_ip1)
    np.testing.assert_array_equal(swapped.s_ip1, batch.s_i)
    assert len(batch.subset([0, 1])) == 2
    with pytest.raises(ContractError):
        stack_pairs([])


def test_cohort_file_restores_everything(tmp_path, tiny_cohort):
    path = tmp_path / "cohort.lmtcoh"
    save_cohort(tiny_cohort, path)
    loaded = load_cohort(path)
    assert loaded.seed == tiny_cohort.seed
    assert loaded.config == tiny_cohort.config
    assert [p.split for p in loaded.patients] == [p.split for p in tiny_cohort.patients]
    for a, b in zip(loaded.exams(), tiny_cohort.exams()):
        assert (a.patient_id, a.eye_id, a.days, a.grade) == (b.patient_id, b.eye_id, b.days, b.grade)
        np.testing.assert_array_equal(a.features, b.features)


def test_cohort_file_rejects_other_formats(tmp_path, tiny_cohort):
    bad = tmp_path / "bad.lmtcoh"
    bad.write_bytes(b"LMTCKPT1" + b"\0" * 32)
    with pytest.raises(FormatError):
        load_cohort(bad)

    good = tmp_path / "good.lmtcoh"
    save_cohort(tiny_cohort, good)
    short = tmp_path / "short.lmtcoh"
    short.write_bytes(good.read_bytes()[:-100])
    with pytest.raises(FormatError):
        load_cohort(short)


def test_csv_export_columns(tmp_path, tiny_cohort):
    path = tmp_path / "cohort.csv"
    export_csv(tiny_cohort, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["patient_id", "eye_id", "t_days", "grade"]
    assert len(frame) == len(tiny_cohort.exams())
