"""Dense-tensor numerics with reverse-mode automatic differentiation.

A ``Tensor`` wraps a float64 numpy array. Operations on tensors that require
gradients are recorded on the active ``Tape`` (a thread-local stack, entered
with ``with Tape() as tape:``), and ``backward(tape, loss)`` walks the tape in
reverse to produce gradients for every leaf tensor that contributed.

The module also carries the pieces of a training stack built on top of the
tape: affine layers, activation and loss functions, the AdamW optimizer, the
one-cycle learning-rate schedule and the binary checkpoint format.
"""

import math
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from src.errors import ContractError, DimensionError, FormatError
from src.utils import logger

BCE_EPS = 1e-7
CHECKPOINT_MAGIC = b"LMTCKPT1"

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Return the tape operations are currently recorded on, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on the current thread (nested tapes resume afterwards)."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """Dense float64 array with an optional handle into the recording tape.

    Attributes:
        data (numpy.ndarray): Row-major float64 values.
        requires_grad (bool): Whether gradients flow to or through this tensor.
        tape_id (int | None): Index of the operation that produced this tensor
            on its tape; None for leaves and constants.
        name (str | None): Optional parameter name (used by checkpoints).
    """

    __slots__ = ("data", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape_id = None
        self.name = name

    @classmethod
    def _wrap(cls, array, requires_grad=False):
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.tape_id = None
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return tensor_matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return tensor_mean(self)


def parameter(data, name=None):
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value):
    """Return ``value`` unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Operations are appended as they execute, so every node's inputs precede
    it; ``backward`` visits each node once, in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, output, inputs, vjp):
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(output, inputs, vjp))


def custom_op(data, inputs, vjp):
    """Build the output tensor of an operation and record it if needed.

    Args:
        data (numpy.ndarray): Forward result.
        inputs (tuple[Tensor, ...]): Operands the result depends on.
        vjp (callable): Maps the output gradient to a tuple with one gradient
            (or None) per input.

    Returns:
        Tensor: The result. It requires grad only when it was recorded.
    """
    tape = active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape.record(out, inputs, vjp)
    return out


class Gradients:
    """Gradients produced by ``backward``, looked up by tensor.

    Tensors the loss does not depend on map to a zero array of their shape.
    """

    def __init__(self, grads, refs):
        self._grads = grads
        self._refs = refs

    def __getitem__(self, tensor):
        g = self._grads.get(id(tensor))
        if g is None or self._refs.get(id(tensor)) is not tensor:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor):
        return self._refs.get(id(tensor)) is tensor

    def for_params(self, params):
        """Return ``{name: grad}`` for a named parameter mapping."""
        return {name: self[p] for name, p in params.items()}


def backward(tape, loss):
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Args:
        tape (Tape): Tape the loss was computed on.
        loss (Tensor): Scalar result.

    Returns:
        Gradients: Gradient of ``loss`` w.r.t. every requires-grad leaf.

    Raises:
        ContractError: If ``loss`` is not a scalar.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    refs = {id(loss): loss}
    if not loss.requires_grad:
        return Gradients({}, {})

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        refs.pop(id(node.output), None)
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                refs[key] = inp
    return Gradients(grads, refs)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# Elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    return custom_op(
        a.data / b.data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    return custom_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,))


def log(a):
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tensor_matmul(a, b):
    """Matrix product of a (m×k) and b (k×n).

    Raises:
        DimensionError: If either operand is not 2-D or inner dimensions differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return custom_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tensor_sum(a, axis=None):
    a = as_tensor(a)
    if axis is None:
        return custom_op(np.asarray(a.data.sum()), (a,),
                         lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return custom_op(a.data.sum(axis=axis, keepdims=True), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tensor_mean(a):
    a = as_tensor(a)
    n = a.data.size
    return custom_op(np.asarray(a.data.mean()), (a,),
                     lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def concat(tensors, axis=-1):
    """Concatenate tensors along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def slice_cols(a, start, stop):
    """Columns ``start:stop`` of a 2-D tensor."""

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return custom_op(a.data[:, start:stop].copy(), (a,), vjp)


def take_rows(a, index):
    """Rows of ``a`` selected by an integer index array (gather)."""
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), vjp)


# Activations


def activation(kind, x):
    """Apply ``relu``, ``tanh``, ``sigmoid`` or ``softmax`` (over the last axis).

    Non-finite inputs propagate; the training loop is responsible for flagging
    them.
    """
    x = as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        return custom_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))
    if kind == "tanh":
        y = np.tanh(x.data)
        return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = special.expit(x.data)
        return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "softmax":
        y = special.softmax(x.data, axis=-1)
        return custom_op(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))
    raise ContractError(f"Unknown activation kind: {kind}")


# Losses


def loss(kind, pred, target):
    """Mean loss between ``pred`` and a constant ``target`` of the same shape.

    Kinds:
        ``bce_soft``: binary cross-entropy against soft targets in [0, 1];
            probabilities are clamped to [BCE_EPS, 1 - BCE_EPS].
        ``mse``: mean squared difference.
        ``soft_ce``: softmax cross-entropy of logits against target
            distributions (one row per sample).

    Returns:
        Tensor: Scalar loss.
    """
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"loss[{kind}]", pred.shape, t.shape)
    n = pred.data.size

    if kind == "bce_soft":
        p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
        value = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
        inside = (pred.data >= BCE_EPS) & (pred.data <= 1.0 - BCE_EPS)
        return custom_op(np.asarray(value), (pred,),
                         lambda g: (g * inside * (p - t) / (p * (1.0 - p)) / n,))
    if kind == "mse":
        diff = pred.data - t
        return custom_op(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,))
    if kind == "soft_ce":
        rows = pred.data.shape[0] if pred.ndim > 1 else 1
        logp = special.log_softmax(pred.data, axis=-1)
        value = -np.sum(t * logp) / rows
        y = np.exp(logp)
        return custom_op(
            np.asarray(value), (pred,),
            lambda g: (g * (y * t.sum(axis=-1, keepdims=True) - t) / rows,))
    raise ContractError(f"Unknown loss kind: {kind}")


# Layers


class Module:
    """Base class for objects holding named parameter tensors."""

    def named_parameters(self):
        """Return an ordered ``{name: Tensor}`` mapping of all parameters."""
        return {}

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state, strict=True):
        """Copy arrays from ``state`` into the parameters in place.

        Raises:
            FormatError: If a parameter is missing (strict mode) or has the
                wrong shape.
        """
        for name, p in self.named_parameters().items():
            if name not in state:
                if strict:
                    raise FormatError(f"Checkpoint is missing parameter '{name}'")
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise FormatError(f"Parameter '{name}' has shape {value.shape}, expected {p.shape}")
            p.data[...] = value


class Linear(Module):
    """Affine layer ``y = x·W + b`` with W of shape (in_dim, out_dim)."""

    def __init__(self, in_dim, out_dim, rng, name="linear"):
        bound = 1.0 / math.sqrt(in_dim) if in_dim > 0 else 0.0
        self.name = name
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)), name=f"{name}.weight")
        self.bias = parameter(rng.uniform(-bound, bound, size=(out_dim,)), name=f"{name}.bias")

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def named_parameters(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def zero_(self):
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0
        return self

    def __call__(self, x):
        return add(tensor_matmul(x, self.weight), self.bias)


# Optimization


@dataclass
class OptimState:
    """AdamW state: moment accumulators keyed by parameter name plus hyper-parameters."""
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def init_optim(params, lr=1e-3, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Create an OptimState with zeroed moments for ``params`` ({name: Tensor})."""
    state = OptimState(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params, grads, state):
    """Apply one AdamW update in place.

    Weight decay is decoupled: ``w ← w·(1 − lr·wd)`` is applied before the
    bias-corrected Adam step. A non-finite gradient skips the whole step
    (the step counter is not advanced).

    Args:
        params (dict[str, Tensor]): Trainable parameters.
        grads (dict[str, numpy.ndarray]): Gradients with matching names/shapes.
        state (OptimState): Optimizer state, updated in place.

    Returns:
        bool: True if the update was applied, False if it was skipped.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adamw_step[{name}]", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning(f"Non-finite gradient for '{name}', skipping optimizer step {state.step + 1}")
            return False

    state.step += 1
    lr, wd = state.lr, state.weight_decay
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if wd:
            p.data *= 1.0 - lr * wd
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


def _cosine(start, end, pct):
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * pct))


def onecycle_lr(step, total_steps, max_lr, pct_start=0.3, div_factor=25.0, final_div_factor=1e4):
    """One-cycle learning rate at ``step``.

    Cosine warm-up from ``max_lr/div_factor`` to ``max_lr`` over the first
    ``pct_start`` of the steps, then cosine annealing to
    ``max_lr/final_div_factor``.

    Raises:
        ContractError: If ``step`` is outside ``[0, total_steps]``.
    """
    if not 0 <= step <= total_steps:
        raise ContractError(f"onecycle_lr: step {step} outside [0, {total_steps}]")
    initial = max_lr / div_factor
    final = max_lr / final_div_factor
    warm = pct_start * total_steps
    if total_steps == 0:
        return initial
    if step <= warm:
        return _cosine(initial, max_lr, step / warm)
    return _cosine(max_lr, final, (step - warm) / (total_steps - warm))


# Checkpoints


def save_checkpoint(params, path):
    """Write named arrays to ``path`` in the LMTCKPT1 format.

    Layout: magic ``LMTCKPT1``, u64 count, then per parameter: u64 name
    length, UTF-8 name, u64 rank, rank × u64 dims, row-major float64 data.
    All integers and floats are little-endian.

    Args:
        params (dict[str, Tensor | numpy.ndarray]): Arrays keyed by name.
        path (str | Path): Destination file.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(params)))
        for name, value in params.items():
            array = np.array(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", array.ndim))
            f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            f.write(array.tobytes())
    logger.info(f"Checkpoint saved: {path} ({len(params)} tensors)")


def load_checkpoint(path):
    """Read a checkpoint written by ``save_checkpoint``.

    Returns:
        dict[str, numpy.ndarray]: Arrays keyed by parameter name, in file order.

    Raises:
        FormatError: On wrong magic bytes or a truncated file, or a parameter name that is not UTF-8.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an LMTCKPT1 checkpoint")
    offset = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    (count,) = take("<Q")
    params = {}
    for _ in range(count):
        (name_len,) = take("<Q")
        if offset + name_len > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        try:
            name = blob[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: parameter name is not valid UTF-8") from e
        offset += name_len
        (rank,) = take("<Q")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        nbytes = 8 * n
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims).astype(np.float64)
        offset += nbytes
    return params
