"""ODE solvers for latent propagation: fixed-step RK4, adaptive Dormand–Prince 5(4)
and adjoint-method gradients.

Solvers work on plain float64 arrays. Dynamics are wrapped in an ``OdeFunc``
which, besides evaluating ``u(t, z)``, can return vector–Jacobian products
``aᵀ∂u/∂z`` and ``aᵀ∂u/∂θ`` computed with the diffcore tape. The adjoint
integrates the augmented system ``[z, a, dL/dθ]`` backwards in time and only
needs ``(z0, t0, t1)`` plus the terminal state.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from src import diffcore
from src.errors import ContractError, SolverError, StiffnessError
from src.utils import logger

METHODS = ("rk4", "dopri5")

# Dormand–Prince 5(4) tableau
DOPRI_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
DOPRI_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
DOPRI_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# b5 − b4, weights of the embedded error estimate
DOPRI_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

# PI controller exponents (Hairer, Nørsett & Wanner)
PI_BETA = 0.04
PI_EXPO = 0.2 - 0.75 * PI_BETA
FACTOR_MIN = 0.2
FACTOR_MAX = 5.0


@dataclass
class SolverConfig:
    """Solver method and tolerances.

    Attributes:
        method (str): ``dopri5`` (adaptive) or ``rk4`` (fixed step).
        rtol (float): Relative tolerance.
        atol (float): Absolute tolerance.
        h0 (float | None): Initial (dopri5) or fixed (rk4) step; None picks
            one automatically.
        max_steps (int): Budget of attempted steps per solve.
        safety (float): Step-size safety factor.
        fixed_steps (int): RK4 step count over the horizon when ``h0`` is None.
        record_knots (bool): Keep ``(t, z)`` after every accepted step.
    """
    method: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-6
    h0: float = None
    max_steps: int = 10000
    safety: float = 0.9
    fixed_steps: int = 20
    record_knots: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"Unknown ODE method: {self.method}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ContractError(f"Tolerances must be positive (rtol={self.rtol}, atol={self.atol})")
        if self.max_steps <= 0 or self.fixed_steps <= 0:
            raise ContractError("max_steps and fixed_steps must be positive")


@dataclass
class IvpResult:
    """Terminal state of an initial value problem and solver statistics."""
    z: np.ndarray
    n_accepted: int = 0
    n_rejected: int = 0
    n_evals: int = 0
    knots: list = field(default_factory=list)


class OdeFunc:
    """Evaluation contract ``u(t, z, θ) → dz/dt``.

    Subclasses implement ``__call__``; differentiable dynamics also implement
    ``value_and_vjp`` and ``parameters``.
    """

    def __call__(self, t, z):
        raise NotImplementedError

    def parameters(self):
        return []

    def value_and_vjp(self, t, z, a):
        """Return ``(u(t, z), aᵀ∂u/∂z, [aᵀ∂u/∂θ for θ in parameters()])``."""
        raise NotImplementedError(f"{type(self).__name__} does not provide vector-Jacobian products")


class ArrayOdeFunc(OdeFunc):
    """Dynamics given as a plain ``f(t, z) -> ndarray`` callable."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, z):
        return np.asarray(self.fn(t, z), dtype=np.float64)


class TensorOdeFunc(OdeFunc):
    """Dynamics written with diffcore operations.

    Args:
        fn (callable): ``fn(t, z: Tensor) -> Tensor`` built from diffcore ops.
        params (list[Tensor]): Parameters θ the dynamics read.
    """

    def __init__(self, fn, params=()):
        self.fn = fn
        self.params = list(params)

    def __call__(self, t, z):
        with diffcore.no_grad():
            return self.fn(t, diffcore.Tensor._wrap(np.asarray(z, dtype=np.float64))).data

    def parameters(self):
        return self.params

    def tensor_call(self, t, z):
        """Evaluate on a Tensor, recording on the active tape."""
        return self.fn(t, z)

    def value_and_vjp(self, t, z, a):
        with diffcore.Tape() as tape:
            zt = diffcore.Tensor(z, requires_grad=True)
            out = self.fn(t, zt)
            total = diffcore.tensor_sum(diffcore.mul(out, a))
        grads = diffcore.backward(tape, total)
        return out.data, grads[zt], [grads[p] for p in self.params]


def _rms(x):
    return math.sqrt(float(np.mean(x * x))) if x.size else 0.0


def _dopri5(f, z, t, h, f0, rtol, atol):
    k = [f0]
    for i in range(1, 7):
        dz = sum(a * ki for a, ki in zip(DOPRI_A[i], k) if a != 0.0)
        k.append(f(t + DOPRI_C[i] * h, z + h * dz))
    z5 = z + h * sum(b * ki for b, ki in zip(DOPRI_B, k) if b != 0.0)
    delta = h * sum(e * ki for e, ki in zip(DOPRI_E, k) if e != 0.0)
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z5))
    return z5, _rms(delta / scale), k[6]


def step_dopri5(f, z, t, h, rtol=1e-5, atol=1e-6):
    """One Dormand–Prince step from ``(t, z)`` with step ``h``.

    Returns:
        tuple[numpy.ndarray, float]: The 5th-order solution and the RMS norm of
        the embedded error estimate scaled by ``atol + rtol·max(|z|, |z5|)``.

    Raises:
        ContractError: If ``h == 0``.
        SolverError: If the state or the step result is non-finite.
    """
    if h == 0:
        raise ContractError("step_dopri5: step size must be non-zero")
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise SolverError("step_dopri5: non-finite state", t=t)
    z5, err, _ = _dopri5(f, z, t, h, f(t, z), rtol, atol)
    if not (np.all(np.isfinite(z5)) and math.isfinite(err)):
        raise SolverError("step_dopri5: non-finite step result", t=t)
    return z5, err


def _initial_step(f, t0, z0, f0, direction, span, rtol, atol):
    scale = atol + rtol * np.abs(z0)
    d0 = _rms(z0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(t0 + direction * h0, z0 + direction * h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    h = min(100.0 * h0, h1, span)
    if not math.isfinite(h) or h <= 0.0:
        h = span / 100.0
    return h


def _rk4_step(f, t, z, h):
    k1 = f(t, z)
    k2 = f(t + h / 2, z + h / 2 * k1)
    k3 = f(t + h / 2, z + h / 2 * k2)
    k4 = f(t + h, z + h * k3)
    return z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _solve_rk4(f, z, t0, t1, config):
    span = abs(t1 - t0)
    n = max(1, math.ceil(span / config.h0)) if config.h0 else config.fixed_steps
    h = (t1 - t0) / n
    result = IvpResult(z=z)
    for i in range(n):
        t = t0 + i * h
        z = _rk4_step(f, t, z, h)
        if not np.all(np.isfinite(z)):
            raise SolverError(f"rk4: non-finite state after t={t:.6g}", t=t)
        result.n_evals += 4
        if config.record_knots:
            result.knots.append((t + h, z.copy()))
    result.z = z
    result.n_accepted = n
    return result


def _solve_dopri5(f, z, t0, t1, config):
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    f0 = f(t0, z)
    if not np.all(np.isfinite(f0)):
        raise SolverError("dopri5: non-finite derivative at the initial state", t=t0)

    result = IvpResult(z=z, n_evals=1)
    h = abs(config.h0) if config.h0 else _initial_step(f, t0, z, f0, direction, span, config.rtol, config.atol)
    result.n_evals += 0 if config.h0 else 1
    err_prev = 1e-4
    t = t0
    while direction * (t1 - t) > 0.0:
        if result.n_accepted + result.n_rejected >= config.max_steps:
            raise StiffnessError(t, h, config.max_steps)
        remaining = abs(t1 - t)
        last = h >= remaining
        if last:
            h = remaining

        z_new, err, f_new = _dopri5(f, z, t, direction * h, f0, config.rtol, config.atol)
        result.n_evals += 6
        if not (np.all(np.isfinite(z_new)) and math.isfinite(err)):
            if h <= 1e-14 * max(1.0, abs(t)):
                raise SolverError(f"dopri5: non-finite state, last good t={t:.6g}", t=t)
            h *= FACTOR_MIN
            result.n_rejected += 1
            continue

        if err <= 1.0:
            t = t1 if last else t + direction * h
            z, f0 = z_new, f_new
            result.n_accepted += 1
            if config.record_knots:
                result.knots.append((t, z.copy()))
            if err == 0.0:
                factor = FACTOR_MAX
            else:
                factor = config.safety * err ** (-PI_EXPO) * err_prev ** PI_BETA
            h *= min(FACTOR_MAX, max(FACTOR_MIN, factor))
            err_prev = max(err, 1e-4)
        else:
            h *= max(FACTOR_MIN, config.safety * err ** (-0.2))
            result.n_rejected += 1
    result.z = z
    return result


def solve_ivp(f, z0, t0, t1, config=None):
    """Solve ``ż = f(t, z)``, ``z(t0) = z0`` and return the state at ``t1``.

    ``t1 < t0`` integrates backwards in time (used by the adjoint pass);
    ``t0 == t1`` returns ``z0`` unchanged.

    Args:
        f (OdeFunc | callable): Dynamics.
        z0 (array-like): Initial state (any shape).
        t0 (float): Initial time.
        t1 (float): Terminal time.
        config (SolverConfig, optional): Method and tolerances.

    Returns:
        IvpResult: Terminal state and step statistics.

    Raises:
        SolverError: Non-finite initial state or solution.
        StiffnessError: ``max_steps`` exceeded.
    """
    config = config or SolverConfig()
    z = np.array(z0, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise SolverError("solve_ivp: non-finite initial state", t=t0)
    if t0 == t1:
        return IvpResult(z=z)
    if config.method == "rk4":
        return _solve_rk4(f, z, t0, t1, config)
    return _solve_dopri5(f, z, t0, t1, config)


def adjoint_grad(f, z0, t0, t1, dL_dz1, config=None, z1=None):
    """Gradients of a loss on ``z(t1)`` by the adjoint sensitivity method.

    Integrates ``[z, a, g]`` from ``t1`` back to ``t0`` with ``a(t1) = dL/dz1``,
    ``ȧ = −aᵀ∂f/∂z`` and ``ġ = −aᵀ∂f/∂θ``, ``g(t1) = 0``.

    Args:
        f (OdeFunc): Dynamics providing ``value_and_vjp``.
        z0 (numpy.ndarray): Initial state of the forward solve.
        t0 (float): Initial time.
        t1 (float): Terminal time.
        dL_dz1 (numpy.ndarray): Loss gradient at the terminal state.
        config (SolverConfig, optional): Solver settings for the backward pass.
        z1 (numpy.ndarray, optional): Terminal state from the forward solve;
            re-solved from ``z0`` when omitted.

    Returns:
        tuple[numpy.ndarray, list[numpy.ndarray]]: ``dL/dz0`` and one gradient
        per entry of ``f.parameters()``.
    """
    config = config or SolverConfig()
    z0 = np.asarray(z0, dtype=np.float64)
    dL_dz1 = np.asarray(dL_dz1, dtype=np.float64)
    params = f.parameters()
    if t0 == t1:
        return dL_dz1.copy(), [np.zeros_like(p.data) for p in params]
    if z1 is None:
        z1 = solve_ivp(f, z0, t0, t1, config).z

    shape = z0.shape
    nz = z0.size
    sizes = [p.data.size for p in params]
    bounds = np.cumsum([2 * nz] + sizes)[:-1]

    def augmented(t, y):
        z = y[:nz].reshape(shape)
        a = y[nz:2 * nz].reshape(shape)
        fz, a_dz, a_dth = f.value_and_vjp(t, z, a)
        return np.concatenate([fz.ravel(), -a_dz.ravel()] + [-g.ravel() for g in a_dth])

    y1 = np.concatenate([np.asarray(z1, dtype=np.float64).ravel(), dL_dz1.ravel(), np.zeros(sum(sizes))])
    try:
        y0 = solve_ivp(ArrayOdeFunc(augmented), y1, t1, t0, config).z
    except SolverError as e:
        logger.error(f"Adjoint backward solve failed on [{t0}, {t1}]: {e}")
        raise e

    dL_dz0 = y0[nz:2 * nz].reshape(shape)
    pieces = np.split(y0, bounds)[1:] if params else []
    return dL_dz0, [g.reshape(p.shape) for g, p in zip(pieces, params)]


def solve_rk4_tensor(f, z0, t0, t1, n_steps):
    """Fixed-step RK4 on Tensors, recorded on the active tape.

    Differentiating through these operations gives discretize-then-differentiate
    gradients, the reference the adjoint is checked against.

    Args:
        f (TensorOdeFunc): Dynamics with ``tensor_call``.
        z0 (Tensor): Initial state.
        t0 (float): Initial time.
        t1 (float): Terminal time.
        n_steps (int): Number of RK4 steps.

    Returns:
        Tensor: State at ``t1``.
    """
    if t0 == t1:
        return z0
    h = (t1 - t0) / n_steps
    z = z0
    for i in range(n_steps):
        t = t0 + i * h
        k1 = f.tensor_call(t, z)
        k2 = f.tensor_call(t + h / 2, z + k1 * (h / 2))
        k3 = f.tensor_call(t + h / 2, z + k2 * (h / 2))
        k4 = f.tensor_call(t + h, z + k3 * h)
        z = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6)
    return z
