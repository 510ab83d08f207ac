"""Mix-up primitives: Beta sampling, the mixing operator, layer selection and soft labels.

Layer index 0 denotes mixing the raw inputs (plain Mix-up); any other index
k mixes the hidden representations after layer k (Manifold Mix-up), so both
variants share one code path.
"""

from dataclasses import dataclass

import numpy as np

from src import diffcore
from src.errors import ContractError, DimensionError
from src.progression import NUM_GRADES
from src.utils import logger

ALPHA_GRID = (0.2, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0)
LAMBDA_MODES = ("batch", "sample")


@dataclass
class MixDraw:
    """One draw of the mixing coefficient and the layer to mix at.

    In ``sample`` lambda mode ``lam`` and ``layer_k`` hold one entry per row
    of the batch; otherwise they are scalars shared by the whole batch.

    Attributes:
        lam (float | numpy.ndarray): Mixing coefficient(s) in [0, 1].
        layer_k (int | numpy.ndarray): Layer index (0 = input mixing).
        alpha (float): Beta concentration the draw came from.
    """
    lam: object
    layer_k: object
    alpha: float

    def __post_init__(self):
        lam = np.asarray(self.lam)
        if np.any(lam < 0.0) or np.any(lam > 1.0):
            raise ContractError(f"Mixing coefficient outside [0, 1]: {self.lam}")
        if np.any(np.asarray(self.layer_k) < 0):
            raise ContractError(f"Layer index must be >= 0, got {self.layer_k}")

    @property
    def per_sample(self):
        return np.ndim(self.lam) > 0


def sample_lambda(alpha, rng, size=None):
    """Draw λ ~ Beta(α, α) as G1/(G1 + G2) with G1, G2 ~ Gamma(α).

    numpy's ``standard_gamma`` uses the Marsaglia–Tsang method. The ratio is
    clamped to [0, 1]; if both gamma draws underflow (tiny α) the draw falls
    back to 0.5.

    Args:
        alpha (float): Concentration, must be > 0.
        rng (numpy.random.Generator): Seeded generator.
        size (int, optional): Number of draws; None returns a float.

    Raises:
        ContractError: If ``alpha <= 0``.
    """
    if not alpha > 0:
        raise ContractError(f"Beta concentration must be > 0, got {alpha}")
    g1 = rng.standard_gamma(alpha, size=size)
    g2 = rng.standard_gamma(alpha, size=size)
    total = g1 + g2
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(total > 0, g1 / np.where(total > 0, total, 1.0), 0.5)
    lam = np.clip(lam, 0.0, 1.0)
    return float(lam) if size is None else lam


def _coefficients(lam):
    """Weights ``(c_a, c_b)`` with ``c_b = 1 − λ`` and ``c_a = 1 − c_b``.

    Both are rounded the same way for λ and ``1 − λ``, so exchanging the
    operands together with λ ↔ 1 − λ swaps the two weights exactly.
    """
    lam = np.asarray(lam, dtype=np.float64)
    c_b = 1.0 - lam
    return 1.0 - c_b, c_b


def mix(a, b, lam):
    """Mix_λ(a, b) = λ·a + (1 − λ)·b, differentiable through both inputs.

    ``lam`` may be a float or a per-row vector (broadcast over the trailing
    axes of 2-D inputs). The result is bit-identical to ``mix(b, a, 1 − λ)``,
    and entries where ``a == b`` are returned unchanged.

    Raises:
        DimensionError: If ``a`` and ``b`` differ in shape.
    """
    a, b = diffcore.as_tensor(a), diffcore.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mix", a.shape, b.shape)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1 and a.ndim == 2:
        lam = lam[:, None]
    c_a, c_b = _coefficients(lam)
    data = np.where(a.data == b.data, a.data, a.data * c_a + b.data * c_b)
    return diffcore.custom_op(data, (a, b), lambda g: (g * c_a, g * c_b))


def mix_time(t_i, t_ip1, lam):
    """t_mix = Mix_λ(t_i, t_ip1), clamped into [t_i, t_ip1] against rounding."""
    t_i = np.asarray(t_i, dtype=np.float64)
    t_ip1 = np.asarray(t_ip1, dtype=np.float64)
    c_i, c_ip1 = _coefficients(lam)
    t_mix = c_i * t_i + c_ip1 * t_ip1
    return np.clip(t_mix, np.minimum(t_i, t_ip1), np.maximum(t_i, t_ip1))


def default_eligible_layers(depth, count=3):
    """The last ``count`` layers of an encoder with ``depth`` layers.

    An encoder without layers can only mix its inputs, so it gets ``(0,)``.

    Examples:
        >>> default_eligible_layers(4)
        (2, 3, 4)
        >>> default_eligible_layers(2)
        (1, 2)
    """
    if depth == 0:
        return (0,)
    return tuple(range(max(1, depth - count + 1), depth + 1))


def select_mix_layer(eligible, rng, size=None):
    """Uniform draw from the eligible layer set S (0 means input mixing).

    Raises:
        ContractError: If ``eligible`` is empty.
    """
    layers = sorted(set(int(k) for k in eligible))
    if not layers:
        raise ContractError("Eligible layer set S is empty")
    picks = rng.integers(len(layers), size=size)
    if size is None:
        return layers[int(picks)]
    return np.asarray(layers)[picks]


def draw_mix(alpha, eligible, rng, batch_size=None, mode="batch"):
    """Sample a MixDraw: one (λ, k) per batch, or one per row in ``sample`` mode."""
    if mode not in LAMBDA_MODES:
        raise ContractError(f"Unknown lambda mode: {mode}")
    if mode == "sample":
        return MixDraw(sample_lambda(alpha, rng, size=batch_size),
                       select_mix_layer(eligible, rng, size=batch_size), alpha)
    return MixDraw(sample_lambda(alpha, rng), select_mix_layer(eligible, rng), alpha)


def one_hot(grades, num_grades=NUM_GRADES):
    """One-hot rows for an array of integer grades."""
    grades = np.asarray(grades, dtype=np.int64)
    out = np.zeros((grades.size, num_grades))
    out[np.arange(grades.size), grades.reshape(-1)] = 1.0
    return out


def soft_label(severity_value, num_grades=NUM_GRADES):
    """Fractional one-hot encoding of an interpolated severity value.

    The mass is split between the neighbouring grades: ``1 − frac`` on
    ``floor(v)`` and ``frac`` on ``ceil(v)``. Integer values give the exact
    one-hot vector. Values outside ``[0, num_grades − 1]`` are clamped with a
    warning.

    Examples:
        >>> soft_label(0.75).tolist()
        [0.25, 0.75, 0.0, 0.0, 0.0]
    """
    top = num_grades - 1
    value = float(severity_value)
    if not 0.0 <= value <= top:
        logger.warning(f"Severity value {value} outside [0, {top}], clamping")
        value = min(max(value, 0.0), float(top))

    label = np.zeros(num_grades)
    low = int(np.floor(value))
    frac = value - low
    if frac == 0.0:
        label[low] = 1.0
    else:
        label[low] = 1.0 - frac
        label[low + 1] = frac
    return label


def soft_labels(values, num_grades=NUM_GRADES):
    """Stack ``soft_label`` over an array of severity values."""
    return np.stack([soft_label(v, num_grades) for v in np.asarray(values).reshape(-1)])

