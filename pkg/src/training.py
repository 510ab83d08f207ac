"""Longitudinal mix-up training: encoder and heads, the LMT loss, the three
time-aware training setups, the grading experiment and the downstream
protocols (linear probe and fine-tuning).
"""

import copy
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from src.cohort import PairBatch, extract_pairs, stack_pairs
from src.diffcore import (
    Linear, Module, Tape, activation, adamw_step, as_tensor, backward, concat, init_optim, loss, no_grad,
    onecycle_lr, take_rows,
)
from src.errors import ContractError, TrainingDiverged, UndefinedMetricError
from src.metrics import grade_from_logits, quadratic_weighted_kappa, roc_auc
from src.mixing import MixDraw, default_eligible_layers, draw_mix, mix, mix_time, one_hot, soft_labels
from src.odesolve import SolverConfig
from src.progression import NUM_GRADES, PROFILES, interpolate_batch
from src.timeaware import GRADIENT_MODES, MODELS, make_time_model, propagate
from src.utils import is_finite, logger, make_rng

SETUPS = ("S1", "S2", "S3")
METHODS = ("erm", "mixup", "manifold_mixup", "lm", "lmm")
PAIRINGS = ("longitudinal", "random")
CLASSIFICATION_LOSSES = ("bce", "ce")
TASKS = {"mild+": 1, "moderate+": 2, "severe+": 3}
PROBE_COHORTS = ("all", "healthy_baseline")
EVAL_CHUNK = 256

# Independent random streams under one seed
_INIT_STREAM = 10
_TRAIN_STREAM = 11
_HEAD_STREAM = 12


@dataclass
class LmtConfig:
    """Hyper-parameters of one training run."""
    alpha: float = 2.0
    profile: str = "linear"
    setup: str = "S3"
    model: str = "node"
    method: str = "lmm"
    epochs: int = 30
    batch_size: int = 64
    max_lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 1
    lambda_mode: str = "batch"
    fixed_lambda: float = None
    classification_loss: str = "bce"
    pairing: str = "longitudinal"
    eligible_layers: tuple = None
    widths: tuple = (128, 128, 64, 64)
    node_hidden: int = 64
    gradient_mode: str = "adjoint"
    rtol: float = 1e-5
    atol: float = 1e-6
    task: str = "severe+"
    probe_cohort: str = "all"
    probe_epochs: int = 20
    finetune_lr_scale: float = 0.1
    horizon_days: float = 730.0
    report_wall_time: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.eligible_layers is None:
            self.eligible_layers = default_eligible_layers(len(self.widths))
        self.eligible_layers = tuple(int(k) for k in self.eligible_layers)
        checks = [
            (self.alpha > 0, f"alpha must be > 0, got {self.alpha}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.epochs >= 0 and self.probe_epochs >= 0, "epoch counts must be >= 0"),
            (self.profile in PROFILES, f"Unknown profile: {self.profile}"),
            (self.setup in SETUPS, f"Unknown setup: {self.setup}"),
            (self.model in MODELS, f"Unknown model: {self.model}"),
            (self.method in METHODS, f"Unknown method: {self.method}"),
            (self.classification_loss in CLASSIFICATION_LOSSES,
             f"Unknown classification loss: {self.classification_loss}"),
            (self.pairing in PAIRINGS, f"Unknown pairing: {self.pairing}"),
            (self.gradient_mode in GRADIENT_MODES, f"Unknown gradient mode: {self.gradient_mode}"),
            (self.task in TASKS, f"Unknown task: {self.task}"),
            (self.probe_cohort in PROBE_COHORTS, f"Unknown probe cohort: {self.probe_cohort}"),
            (self.fixed_lambda is None or 0.0 <= self.fixed_lambda <= 1.0, "fixed_lambda must be in [0, 1]"),
            (all(0 <= k <= len(self.widths) for k in self.eligible_layers),
             f"eligible_layers {self.eligible_layers} outside 0..{len(self.widths)}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ContractError(message)

    def solver_config(self):
        return SolverConfig(rtol=self.rtol, atol=self.atol)


class Encoder(Module):
    """MLP ``g_{1:n}``: ``n`` affine + relu layers. No layers means the identity map.

    Args:
        in_dim (int): Input feature dimension.
        widths (tuple[int, ...]): Output width of every layer.
        rng (numpy.random.Generator): Initialization stream.
    """

    def __init__(self, in_dim, widths, rng, prefix="encoder"):
        dims = (in_dim, *widths)
        self.layers = [Linear(dims[i], dims[i + 1], rng, name=f"{prefix}.{i + 1}") for i in range(len(widths))]
        self.in_dim = in_dim
        self.out_dim = dims[-1]

    @property
    def depth(self):
        return len(self.layers)

    def named_parameters(self):
        params = {}
        for layer in self.layers:
            params.update(layer.named_parameters())
        return params

    def forward_to(self, x, k):
        """Hidden representation after layer ``k`` (``g_{1:k}``)."""
        h = as_tensor(x)
        for layer in self.layers[:k]:
            h = activation("relu", layer(h))
        return h

    def forward_from(self, h, k):
        """Resume from the output of layer ``k`` (``g_{k+1:n}``)."""
        for layer in self.layers[k:]:
            h = activation("relu", layer(h))
        return h

    def __call__(self, x):
        return self.forward_to(x, self.depth)


class Heads(Module):
    """Single affine heads: h1 grades the current exam, h2 regresses time, h3 grades the next visit."""

    def __init__(self, latent_dim, rng, num_grades=NUM_GRADES):
        self.h1 = Linear(latent_dim, num_grades, rng, name="h1")
        self.h2 = Linear(latent_dim, 1, rng, name="h2")
        self.h3 = Linear(latent_dim, num_grades, rng, name="h3")

    def named_parameters(self):
        return {**self.h1.named_parameters(), **self.h2.named_parameters(), **self.h3.named_parameters()}


class LmtModel(Module):
    """Encoder, heads and (optionally) a time-aware model trained together."""

    def __init__(self, feature_dim, config, rng, with_time_model=True):
        self.encoder = Encoder(feature_dim, config.widths, rng)
        self.heads = Heads(self.encoder.out_dim, rng)
        self.time_model = (make_time_model(config.model, self.encoder.out_dim, rng, hidden=config.node_hidden)
                           if with_time_model else None)

    def named_parameters(self):
        params = {**self.encoder.named_parameters(), **self.heads.named_parameters()}
        if self.time_model is not None:
            params.update(self.time_model.named_parameters())
        return params


@dataclass
class TrainResult:
    model: LmtModel
    history: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_loss(self):
        """Validation loss of the kept epoch; NaN when no epoch ran."""
        if not self.best_epoch:
            return math.nan
        return self.history[self.best_epoch - 1]["val_loss"]


@dataclass
class DownstreamResult:
    auc: float
    n_train: int
    n_test: int
    head: Linear = None


@contextmanager
def frozen(module):
    """Stop gradients to ``module``'s parameters for the duration of the block."""
    params = module.parameters()
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


def _as_batch(pair):
    return pair if isinstance(pair, PairBatch) else stack_pairs([pair])


def classification_loss(logits, target, kind="bce"):
    """ℓ between logits and (soft) grade distributions.

    ``bce`` applies a per-grade sigmoid and averages binary cross-entropy over
    grades and rows; ``ce`` is softmax cross-entropy against the distribution.
    """
    if kind == "bce":
        return loss("bce_soft", activation("sigmoid", logits), target)
    if kind == "ce":
        return loss("soft_ce", logits, target)
    raise ContractError(f"Unknown classification loss: {kind}")


def _mix_at(encoder, x_a, x_b, lam, k):
    if not 0 <= k <= encoder.depth:
        raise ContractError(f"Mixing layer {k} outside 0..{encoder.depth}")
    if k == 0:
        return encoder(mix(x_a, x_b, lam))
    return encoder.forward_from(mix(encoder.forward_to(x_a, k), encoder.forward_to(x_b, k), lam), k)


def mix_forward(encoder, x_a, x_b, draw):
    """Latent of mixed inputs under ``draw``; per-sample draws are grouped by layer."""
    if not draw.per_sample:
        return _mix_at(encoder, x_a, x_b, draw.lam, int(draw.layer_k))
    layers = np.asarray(draw.layer_k)
    lam = np.asarray(draw.lam, dtype=np.float64)
    parts, order = [], []
    for k in np.unique(layers):
        rows = np.flatnonzero(layers == k)
        parts.append(_mix_at(encoder, x_a[rows], x_b[rows], lam[rows], int(k)))
        order.append(rows)
    if len(parts) == 1:
        return parts[0]
    return take_rows(concat(parts, axis=0), np.argsort(np.concatenate(order)))


def z_mix_forward(encoder, pair, draw):
    """Latent representation of the mixed pair.

    ``k = 0`` mixes the inputs, ``g(Mix_λ(x_ti, x_ti+1))``; ``k > 0`` mixes the
    hidden states, ``g_{k+1:n}(Mix_λ(g_{1:k}(x_ti), g_{1:k}(x_ti+1)))``.

    Args:
        encoder (Encoder): Backbone ``g``.
        pair (ConsecutivePair | PairBatch): One pair or a batch of pairs.
        draw (MixDraw): Mixing coefficient(s) and layer(s).

    Returns:
        Tensor: Latents, one row per pair.
    """
    batch = _as_batch(pair)
    return mix_forward(encoder, batch.x_i, batch.x_ip1, draw)


def time_consistency(t_mix, t_hat):
    """Batch mean of ``(t_mix − t̂_mix)²``."""
    target = np.asarray(t_mix, dtype=np.float64).reshape(t_hat.shape)
    return loss("mse", t_hat, target)


def mix_targets(batch, draw, profile):
    """Mixed times and the soft labels of the interpolated severity ``I(t_mix)``."""
    t_mix = mix_time(batch.t_i, batch.t_ip1, draw.lam)
    severity = interpolate_batch(profile, batch.s_i, batch.s_ip1, batch.t_i, batch.t_ip1, t_mix)
    return t_mix, soft_labels(severity)


def _check_finite(value, what, draw=None, batch=None):
    if is_finite(value.data):
        return
    detail = f" (λ={draw.lam}, k={draw.layer_k})" if draw is not None else ""
    ids = batch.ids if batch is not None else "n/a"
    message = f"Non-finite {what}{detail} on pairs {ids}"
    logger.error(message)
    raise TrainingDiverged(message)


def lmt_loss(encoder, heads, pair, draw, profile, classification="bce"):
    """LMT objective ``ℓ(h1(z_mix), I(t_mix)) + ‖t_mix − h2(z_mix)‖²``, both terms weighted 1.

    Raises:
        TrainingDiverged: If the loss is not finite; the message names λ, k
            and the pair ids.
    """
    batch = _as_batch(pair)
    z = z_mix_forward(encoder, batch, draw)
    t_mix, target = mix_targets(batch, draw, profile)
    total = classification_loss(heads.h1(z), target, classification) + time_consistency(t_mix, heads.h2(z))
    _check_finite(total, "LMT loss", draw, batch)
    return total


def propagation_loss(model, batch, t_target, target, config):
    """ℓ(h3(ẑ), target) where ẑ is ``g(x_ti)`` propagated to ``t_target``."""
    z = model.encoder(batch.x_i)
    z_hat = propagate(model.time_model, z, batch.t_i, t_target, config.solver_config(),
                      config.gradient_mode, batch.ids)
    return classification_loss(model.heads.h3(z_hat), target, config.classification_loss)


def draw_for(config, rng, batch_size, eligible=None):
    """Sample a MixDraw for a batch, honouring ``fixed_lambda`` when set."""
    eligible = config.eligible_layers if eligible is None else eligible
    draw = draw_mix(config.alpha, eligible, rng, batch_size, config.lambda_mode)
    if config.fixed_lambda is None:
        return draw
    lam = np.full(batch_size, config.fixed_lambda) if draw.per_sample else config.fixed_lambda
    return MixDraw(lam, draw.layer_k, draw.alpha)


def setup_loss(kind, model, batch, config, rng):
    """Training loss of one batch under setup S1, S2 or S3."""
    if kind == "S1":
        return propagation_loss(model, batch, batch.t_ip1, one_hot(batch.s_ip1), config)
    draw = draw_for(config, rng, len(batch))
    t_mix, target = mix_targets(batch, draw, config.profile)
    total = propagation_loss(model, batch, t_mix, target, config)
    if kind == "S3":
        total = total + lmt_loss(model.encoder, model.heads, batch, draw, config.profile,
                                 config.classification_loss)
    return total


def _chunked(batch, size=EVAL_CHUNK):
    for start in range(0, len(batch), size):
        yield batch.subset(np.arange(start, min(start + size, len(batch))))


def next_visit_val_loss(model, batch, config):
    """S1 loss over a whole split, used for model selection in every setup."""
    if batch is None:
        return math.nan
    total = 0.0
    with no_grad():
        for chunk in _chunked(batch):
            value = propagation_loss(model, chunk, chunk.t_ip1, one_hot(chunk.s_ip1), config)
            total += value.item() * len(chunk)
    return total / len(batch)


def _fit(model, train, loss_fn, val_fn, config, rng, label):
    """Minibatch AdamW + one-cycle loop with best-validation model selection."""
    params = model.named_parameters()
    n = len(train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    state = init_optim(params, lr=onecycle_lr(0, total_steps, config.max_lr), weight_decay=config.weight_decay)

    best_loss, best_epoch, best_state = math.inf, 0, model.state_dict()
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            batch = train.subset(order[b * config.batch_size:(b + 1) * config.batch_size])
            state.lr = onecycle_lr(step, total_steps, config.max_lr)
            try:
                with Tape() as tape:
                    value = loss_fn(batch, rng)
                    _check_finite(value, f"{label} loss", batch=batch)
            except TrainingDiverged as e:
                history.append(_history_row(epoch, math.nan, math.nan, state.lr, started, config))
                raise TrainingDiverged(str(e), history) from e
            grads = backward(tape, value).for_params(params)
            adamw_step(params, grads, state)
            step += 1
            losses.append(value.item())

        train_loss = float(np.mean(losses))
        val_loss = val_fn()
        if math.isnan(val_loss):
            val_loss = train_loss
        history.append(_history_row(epoch, train_loss, val_loss, state.lr, started, config))
        logger.info(f"[{label}] epoch {epoch}/{config.epochs}: train={train_loss:.6f} val={val_loss:.6f} "
                    f"lr={state.lr:.3g}")
        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, model.state_dict()

    model.load_state_dict(best_state)
    if state.skipped:
        logger.warning(f"[{label}] {state.skipped} optimizer steps skipped on non-finite gradients")
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def _history_row(epoch, train_loss, val_loss, lr, started, config):
    wall_ms = (time.perf_counter() - started) * 1000.0 if config.report_wall_time else 0.0
    return {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr, "wall_ms": wall_ms}


def _split_pairs(cohort, split):
    pairs = extract_pairs(cohort, split)
    return stack_pairs(pairs) if pairs else None


def train_setup(kind, model_kind, cohort, config):
    """Train encoder, heads and a time-aware model under setup ``kind``.

    S1 propagates ``z_ti`` to ``t_i+1`` and supervises h3 with the one-hot
    next grade. S2 propagates to ``t_mix`` and supervises h3 with the soft
    label of ``I(t_mix)``. S3 adds the LMT loss on the same batch and draw.

    Args:
        kind (str): ``S1``, ``S2`` or ``S3``.
        model_kind (str): ``node`` or ``tlstm`` (``tlstm`` only with S1/S2).
        cohort (Cohort): Split cohort.
        config (LmtConfig): Hyper-parameters.

    Returns:
        TrainResult: Best-validation model and the epoch history.

    Raises:
        ContractError: On an invalid setup/model combination or no training pairs.
        TrainingDiverged: If the loss becomes non-finite.
    """
    if kind not in SETUPS:
        raise ContractError(f"Unknown setup: {kind}")
    if model_kind == "tlstm" and kind == "S3":
        raise ContractError("The T-LSTM model supports setups S1 and S2 only")
    config = replace(config, setup=kind, model=model_kind)
    train = _split_pairs(cohort, "train")
    if train is None:
        raise ContractError("Cohort has no training pairs")
    val = _split_pairs(cohort, "val")

    model = LmtModel(train.x_i.shape[1], config, make_rng(config.seed, _INIT_STREAM))
    label = f"{kind}/{model_kind}/seed={config.seed}"
    logger.info(f"[{label}] training on {len(train)} pairs for {config.epochs} epochs")
    return _fit(
        model, train,
        lambda batch, rng: setup_loss(kind, model, batch, config, rng),
        lambda: next_visit_val_loss(model, val, config),
        config, make_rng(config.seed, _TRAIN_STREAM), label,
    )


def grading_loss(method, model, batch, config, rng):
    """Training loss of one batch for the grading methods.

    ``erm`` grades both exams of each pair; ``mixup`` and ``manifold_mixup``
    mix one-hot labels with λ, pairing the two exams of a pair or (``random``
    pairing) every exam with a random partner in the batch; ``lm`` and ``lmm``
    use the LMT loss at the input or at the eligible layers.
    """
    kind = config.classification_loss
    if method == "erm":
        x = np.concatenate([batch.x_i, batch.x_ip1])
        target = one_hot(np.concatenate([batch.s_i, batch.s_ip1]))
        return classification_loss(model.heads.h1(model.encoder(x)), target, kind)
    if method in ("lm", "lmm"):
        eligible = (0,) if method == "lm" else config.eligible_layers
        draw = draw_for(config, rng, len(batch), eligible)
        return lmt_loss(model.encoder, model.heads, batch, draw, config.profile, kind)

    if config.pairing == "longitudinal":
        x_a, x_b, s_a, s_b = batch.x_i, batch.x_ip1, batch.s_i, batch.s_ip1
    else:
        x_a = np.concatenate([batch.x_i, batch.x_ip1])
        s_a = np.concatenate([batch.s_i, batch.s_ip1])
        partner = rng.permutation(len(x_a))
        x_b, s_b = x_a[partner], s_a[partner]
    eligible = (0,) if method == "mixup" else config.eligible_layers
    draw = draw_for(config, rng, len(x_a), eligible)
    z = mix_forward(model.encoder, x_a, x_b, draw)
    target = mix(one_hot(s_a), one_hot(s_b), draw.lam).data
    return classification_loss(model.heads.h1(z), target, kind)


def _exam_arrays(cohort, split):
    exams = cohort.exams(split)
    if not exams:
        return None, None
    return np.stack([e.features for e in exams]), np.array([e.grade for e in exams], dtype=np.int64)


def grading_val_loss(model, x, grades, config):
    if x is None:
        return math.nan
    with no_grad():
        value = classification_loss(model.heads.h1(model.encoder(x)), one_hot(grades), config.classification_loss)
    return value.item()


def train_grading(method, cohort, config):
    """Train encoder and grading head h1 with one of METHODS.

    Raises:
        ContractError: Unknown method, random pairing with ``lm``/``lmm``, or
            no training pairs.
    """
    if method not in METHODS:
        raise ContractError(f"Unknown grading method: {method}")
    if method in ("lm", "lmm") and config.pairing != "longitudinal":
        raise ContractError("Longitudinal mixing requires longitudinal pairing")
    train = _split_pairs(cohort, "train")
    if train is None:
        raise ContractError("Cohort has no training pairs")
    x_val, s_val = _exam_arrays(cohort, "val")

    model = LmtModel(train.x_i.shape[1], config, make_rng(config.seed, _INIT_STREAM), with_time_model=False)
    label = f"{method}/{config.pairing}/{config.profile}/α={config.alpha}/seed={config.seed}"
    return _fit(
        model, train,
        lambda batch, rng: grading_loss(method, model, batch, config, rng),
        lambda: grading_val_loss(model, x_val, s_val, config),
        config, make_rng(config.seed, _TRAIN_STREAM), label,
    )


def evaluate_grading(model, cohort, split="test"):
    """Quadratic weighted kappa of the h1 argmax grade on every exam of ``split``."""
    x, grades = _exam_arrays(cohort, split)
    if x is None:
        raise ContractError(f"Split '{split}' has no exams")
    with no_grad():
        predicted = grade_from_logits(model.heads.h1(model.encoder(x)))
    return quadratic_weighted_kappa(grades, predicted)


def next_visit_scores(model, batch, config):
    """Softmax of h3 at the next visit time for every pair, shape (B, grades)."""
    probs = []
    with no_grad():
        for chunk in _chunked(batch):
            z_hat = propagate(model.time_model, model.encoder(chunk.x_i), chunk.t_i, chunk.t_ip1,
                              config.solver_config(), config.gradient_mode, chunk.ids)
            probs.append(activation("softmax", model.heads.h3(z_hat)).data)
    return np.concatenate(probs)


def evaluate_next_visit(model, cohort, config, split="test"):
    """AUC of ``P(grade >= thr)`` for every task, plus kappa of the argmax grade.

    Tasks with a single class in ``split`` are skipped with a warning.

    Returns:
        dict[str, float]: ``auc_mild+``, ``auc_moderate+``, ``auc_severe+``
        (when defined) and ``kappa_next``.
    """
    batch = _split_pairs(cohort, split)
    if batch is None:
        raise ContractError(f"Split '{split}' has no pairs")
    probs = next_visit_scores(model, batch, config)
    results = {}
    for task, threshold in TASKS.items():
        try:
            results[f"auc_{task}"] = roc_auc(probs[:, threshold:].sum(axis=1), batch.s_ip1 >= threshold)
        except UndefinedMetricError as e:
            logger.warning(f"Skipping next-visit {task} AUC: {e}")
    results["kappa_next"] = quadratic_weighted_kappa(batch.s_ip1, grade_from_logits(probs))
    return results


def downstream_samples(cohort, split, task, horizon_days=730.0, probe_cohort="all"):
    """Exams with a follow-up within the horizon, labelled by the follow-up grade.

    Label is 1 when the next exam's grade reaches the task threshold.
    ``healthy_baseline`` keeps only exams graded below the threshold.

    Returns:
        tuple[numpy.ndarray, numpy.ndarray]: Features and 0/1 labels.
    """
    if task not in TASKS:
        raise ContractError(f"Unknown task: {task}")
    threshold = TASKS[task]
    features, labels = [], []
    for pair in extract_pairs(cohort, split):
        if pair.exam_ip1.days - pair.exam_i.days > horizon_days:
            continue
        if probe_cohort == "healthy_baseline" and pair.exam_i.grade >= threshold:
            continue
        features.append(pair.exam_i.features)
        labels.append(int(pair.exam_ip1.grade >= threshold))
    if not features:
        raise ContractError(f"No {task} samples in split '{split}' within {horizon_days} days")
    return np.stack(features), np.array(labels, dtype=np.int64)


def _downstream(encoder, cohort, config, train_encoder, label):
    x_train, y_train = downstream_samples(cohort, "train", config.task, config.horizon_days, config.probe_cohort)
    x_test, y_test = downstream_samples(cohort, "test", config.task, config.horizon_days, config.probe_cohort)
    if len(np.unique(y_train)) < 2:
        raise UndefinedMetricError(f"{config.task} training labels contain a single class")

    head = Linear(encoder.out_dim, 1, make_rng(config.seed, _HEAD_STREAM), name="probe")
    params = dict(head.named_parameters())
    if train_encoder:
        params.update(encoder.named_parameters())
        max_lr = config.max_lr * config.finetune_lr_scale
    else:
        max_lr = config.max_lr
        with frozen(encoder), no_grad():
            x_train = encoder(x_train).data
            x_test = encoder(x_test).data

    forward = (lambda x: head(encoder(x))) if train_encoder else head
    rng = make_rng(config.seed, _TRAIN_STREAM)
    steps_per_epoch = math.ceil(len(x_train) / config.batch_size)
    total_steps = config.probe_epochs * steps_per_epoch
    state = init_optim(params, lr=onecycle_lr(0, total_steps, max_lr), weight_decay=config.weight_decay)
    step = 0
    for epoch in range(1, config.probe_epochs + 1):
        order = rng.permutation(len(x_train))
        for b in range(steps_per_epoch):
            rows = order[b * config.batch_size:(b + 1) * config.batch_size]
            state.lr = onecycle_lr(step, total_steps, max_lr)
            with Tape() as tape:
                prob = activation("sigmoid", forward(x_train[rows]))
                value = loss("bce_soft", prob, y_train[rows].reshape(-1, 1).astype(np.float64))
            _check_finite(value, f"{label} loss")
            adamw_step(params, backward(tape, value).for_params(params), state)
            step += 1

    with no_grad():
        scores = forward(x_test).data.reshape(-1)
    auc = roc_auc(scores, y_test)
    logger.info(f"[{label}] {config.task} AUC={auc:.4f} ({len(x_train)} train / {len(x_test)} test samples)")
    return DownstreamResult(auc=auc, n_train=len(x_train), n_test=len(x_test), head=head)


def linear_probe(encoder, cohort, config):
    """Train a linear layer on the frozen encoder and return the test AUC.

    The encoder's parameters are excluded from the tape and left bit-identical.

    Raises:
        UndefinedMetricError: If train or test labels contain a single class.
    """
    return _downstream(encoder, cohort, config, train_encoder=False, label="probe")


def fine_tune(encoder, cohort, config):
    """Train a copy of the encoder and a linear head at ``finetune_lr_scale·max_lr``.

    The encoder passed in is not modified.
    """
    return _downstream(copy.deepcopy(encoder), cohort, config, train_encoder=True, label="fine-tune")
