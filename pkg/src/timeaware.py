"""Time-aware predictors mapping ``(z_ti, target time)`` to a future latent state.

Two models are provided:

- ``NodeDynamics`` + ``node_forward``: a neural ODE whose dynamics network
  sees ``[z, t]``; the latent is integrated from ``t_i`` to the target time.
- ``TLstmCell`` + ``tlstm_forward``: an LSTM cell whose short-term memory is
  discounted by the elapsed time before a standard LSTM step.
"""

import math

import numpy as np

from src import diffcore
from src.diffcore import Linear, Module, activation, concat, custom_op, slice_cols
from src.errors import ContractError, SolverError
from src.odesolve import SolverConfig, TensorOdeFunc, adjoint_grad, solve_ivp, solve_rk4_tensor
from src.utils import logger

MODELS = ("node", "tlstm")
GRADIENT_MODES = ("adjoint", "backprop")


class NodeDynamics(Module):
    """Dynamics network ``u(t, z, θ) = tanh(W2·tanh(W1·[z, t] + b1) + b2)``.

    Args:
        latent_dim (int): Size of z.
        rng (numpy.random.Generator): Initialization stream.
        hidden (int): Width of the hidden layer.
        prefix (str): Parameter name prefix.
    """

    def __init__(self, latent_dim, rng, hidden=64, prefix="node"):
        self.latent_dim = latent_dim
        self.l1 = Linear(latent_dim + 1, hidden, rng, name=f"{prefix}.l1")
        self.l2 = Linear(hidden, latent_dim, rng, name=f"{prefix}.l2")

    def named_parameters(self):
        return {**self.l1.named_parameters(), **self.l2.named_parameters()}

    def zero_(self):
        self.l1.zero_()
        self.l2.zero_()
        return self

    def __call__(self, t, z):
        rows = z.shape[0]
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (rows, 1))
        hidden = activation("tanh", self.l1(concat([z, tcol], axis=1)))
        return activation("tanh", self.l2(hidden))


def node_forward_batch(dyn, z, t_from, t_to, config=None, gradient_mode="adjoint", pair_ids=None):
    """Propagate each row of ``z`` from ``t_from[r]`` to ``t_to[r]``.

    All rows are integrated jointly on ``s ∈ [0, 1]`` with
    ``t = t_from + s·Δ`` and ``dz/ds = Δ·u(t, z)``; rows with ``Δ = 0`` keep
    their initial value. Gradients flow by the adjoint method or, with
    ``gradient_mode="backprop"``, through fixed-step RK4 on the tape.

    Args:
        dyn: Dynamics callable ``dyn(t, z) -> Tensor`` with ``parameters()``.
        z (Tensor): Initial latents, shape (B, d).
        t_from (numpy.ndarray): Start times, shape (B,).
        t_to (numpy.ndarray): Target times, shape (B,).
        config (SolverConfig, optional): Solver settings.
        gradient_mode (str): ``adjoint`` or ``backprop``.
        pair_ids (sequence, optional): Identifiers used in error messages.

    Returns:
        Tensor: Latents at the target times, shape (B, d).

    Raises:
        ContractError: If any target time precedes its start time.
        SolverError: Propagated from the solver with the offending horizons.
    """
    config = config or SolverConfig()
    if gradient_mode not in GRADIENT_MODES:
        raise ContractError(f"Unknown gradient mode: {gradient_mode}")
    t_from = np.asarray(t_from, dtype=np.float64).reshape(-1)
    delta = np.asarray(t_to, dtype=np.float64).reshape(-1) - t_from
    if np.any(delta < 0):
        raise ContractError("node_forward: target time precedes the initial time")
    if not np.any(delta > 0):
        return z

    scale = delta[:, None]
    func = TensorOdeFunc(lambda s, zz: diffcore.mul(dyn(t_from + s * delta, zz), scale), dyn.parameters())

    try:
        if gradient_mode == "backprop":
            return solve_rk4_tensor(func, z, 0.0, 1.0, config.fixed_steps)

        z1 = solve_ivp(func, z.data, 0.0, 1.0, config).z
    except SolverError as e:
        ids = list(pair_ids) if pair_ids is not None else "n/a"
        logger.error(f"NODE propagation failed (pairs={ids}, max horizon={delta.max():.4f}): {e}")
        raise e

    z0 = z.data.copy()

    def vjp(g):
        dz0, dtheta = adjoint_grad(func, z0, 0.0, 1.0, g, config, z1=z1)
        return (dz0, *dtheta)

    return custom_op(z1, (z, *func.parameters()), vjp)


def node_forward(dyn, z_ti, t_i, t_target, config=None, gradient_mode="adjoint"):
    """ODESolve(z_ti, u, t_i, t_target, θ) for a single latent vector.

    Returns ``z_ti`` itself when ``t_target == t_i``.
    """
    if t_target < t_i:
        raise ContractError(f"node_forward: t_target={t_target} precedes t_i={t_i}")
    z_ti = diffcore.as_tensor(z_ti)
    if t_target == t_i:
        return z_ti
    flat = z_ti.ndim == 1
    z = diffcore.reshape(z_ti, (1, -1)) if flat else z_ti
    out = node_forward_batch(dyn, z, np.full(z.shape[0], t_i), np.full(z.shape[0], t_target),
                             config, gradient_mode)
    return diffcore.reshape(out, (-1,)) if flat else out


def time_decay(delta_t):
    """Elapsed-time discount ``g(Δt) = 1 / log(e + Δt)``; ``g(0) = 1``.

    Raises:
        ContractError: If any ``delta_t`` is negative.
    """
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if np.any(delta_t < 0):
        raise ContractError(f"Elapsed time must be non-negative, got {delta_t}")
    return 1.0 / np.log(math.e + delta_t)


class TLstmCell(Module):
    """Time-aware LSTM cell with a decomposed short-term memory.

    The previous hidden and cell states are both initialized from the input
    latent, so the elapsed time acts through the discounted memory.
    """

    def __init__(self, latent_dim, rng, prefix="tlstm"):
        self.latent_dim = latent_dim
        self.gates = Linear(2 * latent_dim, 4 * latent_dim, rng, name=f"{prefix}.gates")
        self.decomp = Linear(latent_dim, latent_dim, rng, name=f"{prefix}.decomp")
        self.out = Linear(latent_dim, latent_dim, rng, name=f"{prefix}.out")

    def named_parameters(self):
        return {
            **self.gates.named_parameters(),
            **self.decomp.named_parameters(),
            **self.out.named_parameters(),
        }


def tlstm_forward(cell, z_ti, delta_t):
    """Predict the latent after ``delta_t`` normalized time units.

    Steps: ``C_S = tanh(W_d·C + b_d)``, ``C* = C − C_S + g(Δt)·C_S``, then one
    LSTM step on ``z_ti`` from state ``(h, C*)``, and an affine read-out of
    the new hidden state.

    Args:
        cell (TLstmCell): Cell parameters.
        z_ti (Tensor): Latent(s), shape (d,) or (B, d).
        delta_t (float | numpy.ndarray): Elapsed time per row.

    Returns:
        Tensor: Predicted latent(s), same shape as ``z_ti``.
    """
    z = diffcore.as_tensor(z_ti)
    flat = z.ndim == 1
    if flat:
        z = diffcore.reshape(z, (1, -1))
    d = cell.latent_dim
    g = time_decay(delta_t).reshape(-1, 1)

    memory = z
    short = activation("tanh", cell.decomp(memory))
    adjusted = memory - short + short * g

    gates = cell.gates(concat([z, z], axis=1))
    i = activation("sigmoid", slice_cols(gates, 0, d))
    f = activation("sigmoid", slice_cols(gates, d, 2 * d))
    o = activation("sigmoid", slice_cols(gates, 2 * d, 3 * d))
    candidate = activation("tanh", slice_cols(gates, 3 * d, 4 * d))

    cell_state = f * adjusted + i * candidate
    hidden = o * activation("tanh", cell_state)
    out = cell.out(hidden)
    return diffcore.reshape(out, (-1,)) if flat else out


def make_time_model(kind, latent_dim, rng, hidden=64):
    """Build the time-aware model named ``kind`` (``node`` or ``tlstm``)."""
    if kind == "node":
        return NodeDynamics(latent_dim, rng, hidden=hidden)
    if kind == "tlstm":
        return TLstmCell(latent_dim, rng)
    raise ContractError(f"Unknown time-aware model: {kind}")


def propagate(model, z, t_from, t_to, config=None, gradient_mode="adjoint", pair_ids=None):
    """Map latents at ``t_from`` to predicted latents at ``t_to`` with either model."""
    if isinstance(model, TLstmCell):
        delta = np.asarray(t_to, dtype=np.float64) - np.asarray(t_from, dtype=np.float64)
        return tlstm_forward(model, z, delta)
    return node_forward_batch(model, z, t_from, t_to, config, gradient_mode, pair_ids)
