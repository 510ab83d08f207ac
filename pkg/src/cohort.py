"""Synthetic longitudinal cohort generation, consecutive-pair extraction and patient splits.

Each eye follows a monotone logistic latent severity trajectory observed at
irregular visit times; the ICDR grade is the rounded latent and the exam's
feature vector is rendered from the continuous latent so that progression
between grades is recoverable from the features.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from src.errors import ContractError, FormatError
from src.progression import MAX_GRADE, check_grade, normalize_time
from src.utils import logger, make_rng

COHORT_MAGIC = b"LMTCOH1"
SPLITS = ("train", "val", "test")


@dataclass
class CohortConfig:
    """Generation parameters for the synthetic cohort.

    Trajectory shape: ``latent(t) = base + amplitude·σ(rate·(t − onset))`` for
    progressing eyes and the mirrored curve for regressing eyes. Small
    amplitude or rate draws give near-flat eyes. Times are in normalized units.
    """
    n_patients: int = 2000
    eyes_per_patient: int = 2
    min_visits: int = 2
    max_visits: int = 5
    gap_median_days: float = 365.0
    gap_sigma: float = 0.5
    gap_min_days: float = 90.0
    gap_max_days: float = 1460.0
    feature_dim: int = 32
    basis_degree: int = 3
    noise_sigma: float = 0.3
    eye_sigma: float = 0.3
    regression_rate: float = 0.1
    base_min: float = -0.4
    base_max: float = 2.0
    amplitude_min: float = 0.6
    amplitude_max: float = 3.0
    rate_min: float = 1.0
    rate_max: float = 6.0

    def __post_init__(self):
        if not 2 <= self.min_visits <= self.max_visits:
            raise ContractError(f"Visit range must satisfy 2 <= min <= max, got [{self.min_visits}, {self.max_visits}]")
        if self.n_patients < 0 or self.eyes_per_patient < 1 or self.feature_dim < 1:
            raise ContractError("n_patients, eyes_per_patient and feature_dim must be positive")
        if not 0.0 <= self.regression_rate <= 1.0:
            raise ContractError(f"regression_rate must be in [0, 1], got {self.regression_rate}")


@dataclass
class Exam:
    """One graded examination of one eye."""
    patient_id: int
    eye_id: int
    days: float
    grade: int
    latent: float
    features: np.ndarray

    @property
    def time(self):
        return normalize_time(self.days)


@dataclass
class Eye:
    patient_id: int
    eye_id: int
    exams: list


@dataclass
class Patient:
    patient_id: int
    eyes: list
    split: str = "train"


@dataclass
class ConsecutivePair:
    """Two time-ordered exams of the same eye, ``exam_i`` before ``exam_ip1``."""
    exam_i: Exam
    exam_ip1: Exam
    index: int = 0

    @property
    def pair_id(self):
        return (self.exam_i.patient_id, self.exam_i.eye_id, self.index)


@dataclass
class Cohort:
    """Patients → eyes → time-sorted exams, with a split label per patient."""
    config: CohortConfig
    seed: int
    patients: list = field(default_factory=list)

    def eyes(self, split=None):
        return [eye for p in self.patients if split is None or p.split == split for eye in p.eyes]

    def exams(self, split=None):
        return [exam for eye in self.eyes(split) for exam in eye.exams]

    def patient_ids(self, split=None):
        return [p.patient_id for p in self.patients if split is None or p.split == split]


@dataclass
class PairBatch:
    """Consecutive pairs stacked into arrays for vectorized training."""
    x_i: np.ndarray
    x_ip1: np.ndarray
    t_i: np.ndarray
    t_ip1: np.ndarray
    s_i: np.ndarray
    s_ip1: np.ndarray
    ids: list

    def __len__(self):
        return len(self.ids)

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return PairBatch(self.x_i[index], self.x_ip1[index], self.t_i[index], self.t_ip1[index],
                         self.s_i[index], self.s_ip1[index], [self.ids[i] for i in index])

    def swapped(self):
        """The same pairs with the two exams exchanged (times and grades included)."""
        return PairBatch(self.x_ip1, self.x_i, self.t_ip1, self.t_i, self.s_ip1, self.s_i, list(self.ids))


def basis(latent_severity, degree):
    """Polynomial basis ``[u^0, ..., u^degree]`` of ``u = severity / 4``."""
    u = np.asarray(latent_severity, dtype=np.float64) / MAX_GRADE
    return np.stack([u ** k for k in range(degree + 1)], axis=-1)


def make_mixing_matrix(config, rng):
    """Fixed random matrix B (feature_dim × basis size); higher powers get smaller columns."""
    scale = 1.0 / np.arange(1, config.basis_degree + 2)
    return rng.normal(size=(config.feature_dim, config.basis_degree + 1)) * scale


def render_exam(grade, latent_severity, rng, config, mixing_matrix):
    """Feature vector ``B·φ(latent) + η`` for one exam.

    Args:
        grade (int): ICDR grade of the exam (validated only).
        latent_severity (float): Continuous severity driving the features.
        rng (numpy.random.Generator): Noise stream.
        config (CohortConfig): Supplies ``noise_sigma`` and ``basis_degree``.
        mixing_matrix (numpy.ndarray): The cohort's shared matrix B.

    Returns:
        numpy.ndarray: Features of length ``config.feature_dim``.
    """
    check_grade(grade)
    clean = mixing_matrix @ basis(latent_severity, config.basis_degree)
    return clean + rng.normal(0.0, config.noise_sigma, size=clean.shape) if config.noise_sigma > 0 else clean


def _simulate_eye(patient_id, eye_id, rng, config, mixing_matrix):
    n_visits = int(rng.integers(config.min_visits, config.max_visits + 1))
    gaps = np.clip(rng.lognormal(np.log(config.gap_median_days), config.gap_sigma, size=n_visits - 1),
                   config.gap_min_days, config.gap_max_days)
    days = np.concatenate([[0.0], np.cumsum(gaps)])
    t = days / 730.0

    regressing = rng.random() < config.regression_rate
    base = rng.uniform(config.base_min, config.base_max)
    amplitude = rng.uniform(config.amplitude_min, config.amplitude_max)
    rate = rng.uniform(config.rate_min, config.rate_max)
    onset = rng.uniform(0.0, t[-1])
    rise = special.expit(rate * (t - onset))
    if regressing:
        latent = base + amplitude * (1.0 - rise)
    else:
        latent = base + amplitude * rise
    grades = np.clip(np.rint(latent), 0, MAX_GRADE).astype(int)

    offset = rng.normal(0.0, config.eye_sigma, size=config.feature_dim)
    exams = [
        Exam(patient_id, eye_id, float(d), int(g), float(s),
             render_exam(int(g), float(s), rng, config, mixing_matrix) + offset)
        for d, g, s in zip(days, grades, latent)
    ]
    if np.unique(grades).size < 2:
        return None
    return Eye(patient_id, eye_id, exams)


def generate_cohort(config, seed):
    """Generate a synthetic cohort deterministically from ``(config, seed)``.

    Every patient draws from its own stream ``(seed, 1, patient_id)``, so the
    result does not depend on generation order. Eyes without any grade change
    are dropped, and so are patients left without eyes.

    Raises:
        ContractError: If no eye survives the filtering.
    """
    mixing_matrix = make_mixing_matrix(config, make_rng(seed, 0))
    patients = []
    for pid in range(config.n_patients):
        rng = make_rng(seed, 1, pid)
        eyes = [_simulate_eye(pid, e, rng, config, mixing_matrix) for e in range(config.eyes_per_patient)]
        eyes = [eye for eye in eyes if eye is not None]
        if eyes:
            patients.append(Patient(pid, eyes))
    if not patients:
        raise ContractError("Cohort configuration retained zero eyes with a severity change")

    cohort = Cohort(config=config, seed=seed, patients=patients)
    logger.info(f"Generated cohort: {len(patients)} patients, {len(cohort.eyes())} eyes, "
                f"{len(cohort.exams())} exams (seed={seed})")
    return cohort


def split_patients(cohort, fractions=(0.6, 0.2, 0.2), seed=0):
    """Assign every patient to train/val/test at random, in place.

    Sizes are ``round(f·N)`` for train and val, the remainder for test.

    Raises:
        ContractError: If the fractions are negative or do not sum to 1.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"Split fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(cohort.patients)
    order = make_rng(seed, 2).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        cohort.patients[idx].split = split
    return cohort


def extract_pairs(cohort, split=None):
    """All consecutive same-eye pairs (m − 1 per eye with m visits) for a split."""
    pairs = []
    for eye in cohort.eyes(split):
        exams = sorted(eye.exams, key=lambda e: e.days)
        pairs.extend(ConsecutivePair(a, b, i) for i, (a, b) in enumerate(zip(exams[:-1], exams[1:])))
    return pairs


def stack_pairs(pairs):
    """Stack a list of ConsecutivePair into a PairBatch."""
    if not pairs:
        raise ContractError("Cannot stack an empty pair list")
    return PairBatch(
        x_i=np.stack([p.exam_i.features for p in pairs]),
        x_ip1=np.stack([p.exam_ip1.features for p in pairs]),
        t_i=np.array([p.exam_i.time for p in pairs]),
        t_ip1=np.array([p.exam_ip1.time for p in pairs]),
        s_i=np.array([p.exam_i.grade for p in pairs], dtype=np.int64),
        s_ip1=np.array([p.exam_ip1.grade for p in pairs], dtype=np.int64),
        ids=[p.pair_id for p in pairs],
    )


def _record_dtype(feature_dim):
    return np.dtype([
        ("patient_id", "<u4"), ("eye_id", "u1"), ("grade", "u1"), ("split", "u1"),
        ("days", "<f8"), ("latent", "<f8"), ("features", "<f8", (feature_dim,)),
    ])


def save_cohort(cohort, path):
    """Persist a cohort as a single LMTCOH1 file.

    Layout: magic ``LMTCOH1``, u64 seed, u64 config-JSON length, the JSON
    config echo, u64 feature dim, u64 exam count, then one little-endian
    record per exam (patient id, eye id, grade, split, days, latent, features).
    """
    config_blob = json.dumps(asdict(cohort.config), sort_keys=True).encode("utf-8")
    dim = cohort.config.feature_dim
    rows = [(p.patient_id, eye.eye_id, exam.grade, SPLITS.index(p.split), exam.days, exam.latent, exam.features)
            for p in cohort.patients for eye in p.eyes for exam in eye.exams]
    records = np.array(rows, dtype=_record_dtype(dim))
    with open(path, "wb") as f:
        f.write(COHORT_MAGIC)
        f.write(struct.pack("<QQ", cohort.seed, len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<QQ", dim, len(records)))
        f.write(records.tobytes())
    logger.info(f"Cohort saved: {path} ({len(records)} exams)")


def load_cohort(path):
    """Read a cohort written by ``save_cohort``.

    Raises:
        FormatError: On wrong magic bytes, unreadable config or truncation.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(COHORT_MAGIC)] != COHORT_MAGIC:
        raise FormatError(f"{path}: not an LMTCOH1 cohort file")
    try:
        offset = len(COHORT_MAGIC)
        seed, config_len = struct.unpack_from("<QQ", blob, offset)
        offset += 16
        config = CohortConfig(**json.loads(blob[offset:offset + config_len].decode("utf-8")))
        offset += config_len
        dim, count = struct.unpack_from("<QQ", blob, offset)
        offset += 16
        records = np.frombuffer(blob, dtype=_record_dtype(dim), count=count, offset=offset)
    except (struct.error, ValueError, TypeError) as e:
        raise FormatError(f"{path}: corrupt cohort file ({e})") from e

    patients = {}
    for r in records:
        pid = int(r["patient_id"])
        patient = patients.setdefault(pid, Patient(pid, [], SPLITS[int(r["split"])]))
        if not patient.eyes or patient.eyes[-1].eye_id != int(r["eye_id"]):
            patient.eyes.append(Eye(pid, int(r["eye_id"]), []))
        patient.eyes[-1].exams.append(Exam(pid, int(r["eye_id"]), float(r["days"]), int(r["grade"]),
                                           float(r["latent"]), np.array(r["features"], dtype=np.float64)))
    return Cohort(config=config, seed=int(seed), patients=list(patients.values()))


def export_csv(cohort, path):
    """Write one row per exam with columns patient_id, eye_id, t_days, grade."""
    frame = pd.DataFrame(
        [(exam.patient_id, exam.eye_id, exam.days, exam.grade) for exam in cohort.exams()],
        columns=["patient_id", "eye_id", "t_days", "grade"],
    )
    frame.to_csv(path, index=False, lineterminator="\n")
