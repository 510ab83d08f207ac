"""Experiment configuration.

Configuration files are flat ``key=value`` files (dotenv syntax) read with
python-dotenv; ``KEY=VALUE`` overrides from the command line are applied on
top, last writer wins. Every value is coerced to the type of the matching
``ExperimentConfig`` field, and the resolved merge can be written back out as
``config.env``.
"""

import os
from dataclasses import asdict, dataclass, field, fields

from dotenv import dotenv_values

from src.cohort import CohortConfig
from src.errors import ContractError, UsageError
from src.mixing import ALPHA_GRID
from src.training import LmtConfig
from src.utils import logger

LR_GRID = (1e-2, 1e-3, 1e-4)


def _items(kind):
    return {"items": kind}


@dataclass
class ExperimentConfig:
    """Every key a command may read, with its default."""
    # Cohort
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
    split_fractions: tuple = field(default=(0.6, 0.2, 0.2), metadata=_items(float))
    cohort_seed: int = 0
    cohort_path: str = ""
    # Training
    method: str = "lmm"
    setup: str = "S3"
    model: str = "node"
    alpha: float = 2.0
    alphas: tuple = field(default=ALPHA_GRID, metadata=_items(float))
    profile: str = "linear"
    epochs: int = 30
    batch_size: int = 64
    max_lr: float = 1e-3
    learning_rates: tuple = field(default=LR_GRID, metadata=_items(float))
    weight_decay: float = 1e-4
    seeds: tuple = field(default=(1, 2, 3), metadata=_items(int))
    lambda_mode: str = "batch"
    fixed_lambda: float = field(default=None, metadata={"optional": True})
    classification_loss: str = "bce"
    pairing: str = "longitudinal"
    eligible_layers: tuple = field(default=None, metadata={"items": int, "optional": True})
    widths: tuple = field(default=(128, 128, 64, 64), metadata=_items(int))
    node_hidden: int = 64
    gradient_mode: str = "adjoint"
    rtol: float = 1e-5
    atol: float = 1e-6
    # Downstream
    task: str = "severe+"
    probe_cohort: str = "all"
    probe_epochs: int = 20
    finetune_lr_scale: float = 0.1
    horizon_days: float = 730.0
    checkpoint: str = ""
    # Output
    report_wall_time: bool = False
    output_dir: str = "runs"

    def cohort_config(self):
        names = {f.name for f in fields(CohortConfig)}
        return CohortConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def lmt_config(self, seed, **changes):
        """The training configuration for one seed, with optional field changes."""
        names = {f.name for f in fields(LmtConfig)}
        values = {k: v for k, v in asdict(self).items() if k in names}
        values.update(seed=seed, **changes)
        return LmtConfig(**values)

    def to_env_text(self):
        """Resolved configuration in ``key=value`` form, one key per line."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = ""
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _coerce(f, raw):
    text = "" if raw is None else str(raw).strip()
    if f.metadata.get("optional") and text in ("", "none"):
        return None
    if "items" in f.metadata:
        kind = f.metadata["items"]
        return tuple(kind(part.strip()) for part in text.split(",") if part.strip())
    if f.type is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if f.type is int:
        return int(text)
    if f.type is float:
        return float(text)
    return text


def parse_overrides(pairs):
    """Turn ``["key=value", ...]`` into a dict.

    Raises:
        UsageError: If an item has no ``=``.
    """
    values = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"Override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value
    return values


def resolve_config(path=None, overrides=None):
    """Merge defaults, a config file and overrides into an ExperimentConfig.

    Args:
        path (str, optional): dotenv-style configuration file.
        overrides (dict[str, str], optional): Values applied after the file.

    Returns:
        ExperimentConfig: The validated configuration.

    Raises:
        UsageError: Unknown key, unparsable value or invalid combination.
    """
    raw = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Configuration file not found: {path}")
        raw.update(dotenv_values(path))
    raw.update(overrides or {})

    values = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise UsageError(f"Unknown configuration key: {key}")
        try:
            values[key] = _coerce(_FIELDS[key], value)
        except ValueError as e:
            raise UsageError(f"Invalid value for {key}: {e}") from e

    config = ExperimentConfig(**values)
    try:
        config.cohort_config()
        config.lmt_config(seed=0)
        if not all(lr > 0 for lr in config.learning_rates):
            raise ContractError(f"learning_rates must be positive, got {config.learning_rates}")
    except ContractError as e:
        logger.error(f"Invalid configuration: {e}")
        raise UsageError(str(e)) from e
    return config
