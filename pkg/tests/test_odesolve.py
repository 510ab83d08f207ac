import math

import numpy as np
import pytest
from conftest import rel_error
from scipy import linalg

from src import diffcore
from src.diffcore import Linear, Tape, activation, backward
from src.errors import ContractError, SolverError, StiffnessError
from src.odesolve import (
    ArrayOdeFunc, SolverConfig, TensorOdeFunc, adjoint_grad, solve_ivp, solve_rk4_tensor, step_dopri5,
)

ROTATION = np.array([[0.0, 1.0], [-1.0, 0.0]])


def test_exponential_growth_to_e():
    result = solve_ivp(lambda t, z: z, np.array([1.0]), 0.0, 1.0, SolverConfig(rtol=1e-7, atol=1e-9))
    assert abs(result.z[0] - math.e) < 1e-6
    assert result.n_accepted > 0


def test_rotation_quarter_turn():
    z = solve_ivp(lambda t, z: ROTATION @ z, np.array([0.0, 1.0]), 0.0, math.pi / 2,
                  SolverConfig(rtol=1e-7, atol=1e-9)).z
    np.testing.assert_allclose(z, [1.0, 0.0], atol=1e-5)


def test_linear_system_matches_matrix_exponential(rng):
    a = rng.normal(size=(3, 3)) * 0.5
    z0 = rng.normal(size=3)
    z = solve_ivp(lambda t, z: a @ z, z0, 0.0, 1.3, SolverConfig(rtol=1e-8, atol=1e-10)).z
    np.testing.assert_allclose(z, linalg.expm(1.3 * a) @ z0, atol=1e-6)


def test_backward_integration_inverts_forward():
    config = SolverConfig(rtol=1e-9, atol=1e-11)
    z1 = solve_ivp(lambda t, z: -z + np.sin(t), np.array([0.5]), 0.0, 1.0, config).z
    z0 = solve_ivp(lambda t, z: -z + np.sin(t), z1, 1.0, 0.0, config).z
    np.testing.assert_allclose(z0, [0.5], atol=1e-7)


def test_zero_horizon_returns_initial_state_exactly():
    z0 = np.array([0.1, 0.2])
    result = solve_ivp(lambda t, z: z * 100.0, z0, 0.3, 0.3)
    np.testing.assert_array_equal(result.z, z0)
    assert result.n_evals == 0


def test_local_error_is_fifth_order():
    errors = []
    for h in (0.1, 0.05):
        z5, _ = step_dopri5(lambda t, z: z, np.array([1.0]), 0.0, h)
        errors.append(abs(z5[0] - math.exp(h)))
    order = math.log2(errors[0] / errors[1]) - 1.0
    assert abs(order - 5.0) < 0.3


def test_step_rejects_zero_step():
    with pytest.raises(ContractError):
        step_dopri5(lambda t, z: z, np.array([1.0]), 0.0, 0.0)


def test_rk4_fixed_step():
    result = solve_ivp(lambda t, z: z, np.array([1.0]), 0.0, 1.0, SolverConfig(method="rk4", fixed_steps=50))
    assert abs(result.z[0] - math.e) < 1e-7
    assert result.n_accepted == 50


def test_step_budget_raises_stiffness_error():
    config = SolverConfig(rtol=1e-10, atol=1e-12, max_steps=5)
    with pytest.raises(StiffnessError) as excinfo:
        solve_ivp(lambda t, z: -1000.0 * (z - np.cos(t)), np.array([0.0]), 0.0, 10.0, config)
    assert excinfo.value.t < 10.0


def test_non_finite_initial_state_raises():
    with pytest.raises(SolverError):
        solve_ivp(lambda t, z: z, np.array([np.nan]), 0.0, 1.0)


def test_knots_are_recorded_in_time_order():
    result = solve_ivp(lambda t, z: -z, np.array([1.0]), 0.0, 2.0, SolverConfig(record_knots=True))
    times = [t for t, _ in result.knots]
    assert times[-1] == 2.0
    assert np.all(np.diff(times) > 0)


def _tiny_dynamics(rng):
    l1 = Linear(3, 4, rng, name="l1")
    l2 = Linear(4, 2, rng, name="l2")

    def fn(t, z):
        tcol = np.full((z.shape[0], 1), t)
        return activation("tanh", l2(activation("tanh", l1(diffcore.concat([z, tcol], axis=1)))))

    return TensorOdeFunc(fn, l1.parameters() + l2.parameters())


def test_adjoint_matches_discretize_then_differentiate(rng):
    for _ in range(5):
        func = _tiny_dynamics(rng)
        z0 = rng.normal(size=(3, 2))
        weight = rng.normal(size=(3, 2))
        config = SolverConfig(rtol=1e-9, atol=1e-11)

        z1 = solve_ivp(func, z0, 0.0, 0.8, config).z
        dz0, dtheta = adjoint_grad(func, z0, 0.0, 0.8, weight, config)

        with Tape() as tape:
            z_start = diffcore.parameter(z0)
            z_end = solve_rk4_tensor(func, z_start, 0.0, 0.8, n_steps=200)
            total = diffcore.tensor_sum(diffcore.mul(z_end, weight))
        grads = backward(tape, total)

        np.testing.assert_allclose(z1, z_end.data, atol=1e-7)
        assert rel_error(dz0, grads[z_start]) < 1e-3
        for g, p in zip(dtheta, func.parameters()):
            assert rel_error(g, grads[p]) < 1e-3


def test_adjoint_zero_horizon_passes_gradient_through(rng):
    func = _tiny_dynamics(rng)
    g = rng.normal(size=(2, 2))
    dz0, dtheta = adjoint_grad(func, rng.normal(size=(2, 2)), 0.5, 0.5, g)
    np.testing.assert_array_equal(dz0, g)
    assert all(np.all(d == 0) for d in dtheta)


def test_array_function_has_no_vjp():
    with pytest.raises(NotImplementedError):
        ArrayOdeFunc(lambda t, z: z).value_and_vjp(0.0, np.ones(1), np.ones(1))


def test_solver_config_validation():
    with pytest.raises(ContractError):
        SolverConfig(method="euler")
    with pytest.raises(ContractError):
        SolverConfig(rtol=0.0)


def test_adjoint_of_scalar_growth_matches_closed_form():
    a = diffcore.parameter(np.array([1.0]))
    func = TensorOdeFunc(lambda t, z: diffcore.mul(z, a), [a])
    config = SolverConfig(rtol=1e-10, atol=1e-12)
    dz0, (da,) = adjoint_grad(func, np.array([[1.0]]), 0.0, 1.0, np.array([[1.0]]), config)
    assert dz0[0, 0] == pytest.approx(math.e, abs=1e-7)
    assert da[0] == pytest.approx(math.e, abs=1e-7)


def test_adjoint_of_zero_dynamics_passes_gradient_through(rng):
    theta = diffcore.parameter(rng.normal(size=3))
    func = TensorOdeFunc(lambda t, z: diffcore.mul(z, 0.0), [theta])
    g = rng.normal(size=(2, 3))
    dz0, (dtheta,) = adjoint_grad(func, rng.normal(size=(2, 3)), 0.0, 1.5, g)
    np.testing.assert_allclose(dz0, g, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(dtheta, np.zeros(3))


def test_accuracy_improves_as_tolerance_tightens():
    errors = []
    for rtol in (1e-3, 1e-5, 1e-7, 1e-9):
        z = solve_ivp(lambda t, z: z, np.array([1.0]), 0.0, 1.0, SolverConfig(rtol=rtol, atol=rtol * 1e-2)).z
        errors.append(abs(z[0] - math.e))
    assert all(later <= earlier for earlier, later in zip(errors, errors[1:]))
    assert errors[-1] < 1e-7


def test_linear_dynamics_solutions_scale_with_the_initial_state(rng):
    a = rng.normal(size=(3, 3)) * 0.5
    z0 = rng.normal(size=3)
    config = SolverConfig(rtol=1e-9, atol=1e-11)
    base = solve_ivp(lambda t, z: a @ z, z0, 0.0, 1.0, config).z
    for scale in (-2.0, 0.5, 3.0):
        scaled = solve_ivp(lambda t, z: a @ z, scale * z0, 0.0, 1.0, config).z
        np.testing.assert_allclose(scaled, scale * base, atol=1e-7)
