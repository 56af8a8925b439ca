import numpy as np
import pytest
from scipy.integrate import solve_ivp

import pfstab as pf
from pfstab.errors import ConfigurationError, NumericError
from pfstab.models import pendulum_acceleration, pendulum_step


def test_equilibrium_is_exact_fixed_point():
    for zeta in (0.0, -0.09, 0.07):
        nxt = pendulum_step(np.zeros(2), 0.0, zeta)
        assert np.array_equal(nxt, np.zeros(2))


def test_acceleration_at_quarter_pi():
    # 19.6*sin(pi/4) / (1.33 - 0.2*cos^2(pi/4)), frozen from a hand evaluation
    assert pendulum_acceleration(np.pi / 4, 0.0, 0.0, 0.0) == pytest.approx(
        11.267717814029538, abs=1e-12)


def test_downward_equilibrium_zero_acceleration():
    assert abs(pendulum_acceleration(np.pi, 0.0, 0.0, 0.3)) < 1e-12


def test_rk4_against_reference_integrator():
    # independent oracle: high-accuracy adaptive integration of the same ODE
    def rhs(t, y, u, zeta):
        return [y[1], pendulum_acceleration(y[0], y[1], u, zeta)]

    rng = np.random.default_rng(0)
    for _ in range(5):
        y0 = rng.uniform([-3.0, -9.0], [3.0, 9.0])
        u = rng.choice([-80.0, -20.0, 0.0, 30.0])
        zeta = rng.uniform(-0.1, 0.1)
        ref = solve_ivp(rhs, (0.0, 0.1), y0, args=(u, zeta), rtol=1e-12, atol=1e-12)
        err_full = np.max(np.abs(pendulum_step(y0, u, zeta, dt=0.1) - ref.y[:, -1]))
        assert err_full < 5e-3  # one benchmark step, well below the cell size
        # fourth-order convergence: two half steps cut the error by about 16
        half = pendulum_step(pendulum_step(y0, u, zeta, dt=0.05), u, zeta, dt=0.05)
        err_half = np.max(np.abs(half - ref.y[:, -1]))
        assert err_half < err_full / 8.0 + 1e-12


def test_euler_option_differs_and_is_first_order():
    y0 = np.array([1.0, 0.0])
    rk4 = pendulum_step(y0, 0.0, 0.0, dt=0.1)
    euler = pendulum_step(y0, 0.0, 0.0, dt=0.1, method="euler")
    assert not np.array_equal(rk4, euler)
    # euler with x' = v keeps x unchanged when v=0
    assert euler[0] == y0[0]


def test_step_is_deterministic_and_vectorized():
    states = np.array([[0.3, 1.0], [0.3, 1.0], [-2.0, 4.0]])
    out1 = pendulum_step(states, 10.0, 0.05)
    out2 = pendulum_step(states, 10.0, 0.05)
    assert np.array_equal(out1, out2)
    assert np.array_equal(out1[0], out1[1])
    single = pendulum_step(states[2], 10.0, 0.05)
    assert np.array_equal(single, out1[2])


def test_step_rejects_non_finite():
    with pytest.raises(NumericError):
        pendulum_step(np.array([np.nan, 0.0]), 0.0, 0.0)


def test_velocity_saturation():
    system = pf.pendulum_model(velocity_limit=10.0)
    raw = pf.pendulum_model(velocity_limit=None)
    x0 = np.array([np.pi / 2, 9.9])
    assert raw.step(x0, 0.0, 0.0)[1] > 10.0
    assert system.step(x0, 0.0, 0.0)[1] == 10.0


def test_control_channel_gate():
    system = pf.pendulum_model(noise_channel="control", velocity_limit=None)
    x0 = np.array([0.5, 0.0])
    gated = system.step(x0, 80.0, 0.0)     # erased input
    free = system.step(x0, 0.0, 1.0)       # same as zero input applied
    assert np.array_equal(gated, free)
    assert not np.array_equal(system.step(x0, 80.0, 1.0), gated)


def test_quantize_uniform_noise_midpoints():
    nm = pf.quantize_uniform_noise(0.1, 10)
    assert np.allclose(nm.values, np.arange(-0.09, 0.1, 0.02))
    assert np.allclose(nm.probs, 0.1)
    assert abs(nm.probs.sum() - 1.0) <= 1e-15
    assert abs(nm.values.mean()) < 1e-15

    two = pf.quantize_uniform_noise(0.1, 2)
    assert np.allclose(two.values, [-0.05, 0.05])

    one = pf.quantize_uniform_noise(0.5, 1)
    assert one.values[0] == 0.0 and one.probs[0] == 1.0


def test_bernoulli_noise():
    nm = pf.bernoulli_noise(0.85)
    assert np.array_equal(nm.values, [1.0, 0.0])
    assert np.allclose(nm.probs, [0.85, 0.15])
    assert pf.bernoulli_noise(1.0).probs[1] == 0.0
    with pytest.raises(ConfigurationError):
        pf.bernoulli_noise(1.5)


def test_noise_validation():
    with pytest.raises(ConfigurationError):
        pf.NoiseModel(np.array([0.0, 1.0]), np.array([0.6, 0.5]))
    with pytest.raises(ConfigurationError):
        pf.quantize_uniform_noise(-1.0, 4)


def test_quadratic_cost_values():
    assert pf.quadratic_cost(np.zeros(2), 0.0) == 0.0
    assert pf.quadratic_cost(np.array([1.0, 2.0]), 3.0) == 14.0
    assert pf.quadratic_cost(np.array([np.pi, 0.0]), 10.0) == pytest.approx(
        np.pi ** 2 + 100.0, rel=1e-15)


def test_stage_cost_nonnegative_and_zero_at_target():
    cost = pf.quadratic_stage_cost()
    rng = np.random.default_rng(1)
    states = rng.normal(size=(50, 2))
    for u in (-80.0, 0.0, 25.0):
        vals = cost.g(states, u, 0.03)
        assert np.all(vals >= 0.0)
    assert cost.g(np.zeros((1, 2)), 0.0, 0.09)[0] == 0.0


def test_check_equilibrium():
    system = pf.pendulum_model()
    pf.models.check_equilibrium(system, pf.quantize_uniform_noise(0.1, 10))
    shifted = pf.SystemModel(step=lambda x, u, xi: np.atleast_2d(x) + 1.0, dimension=2)
    with pytest.raises(pf.ModelError):
        pf.models.check_equilibrium(shifted, pf.no_noise())


def test_control_grid_validation():
    grid = pf.ControlGrid.from_range(-80.0, 80.0, 10.0)
    assert len(grid) == 17
    assert grid.values[0] == -80.0 and grid.values[-1] == 80.0
    with pytest.raises(ConfigurationError):
        pf.ControlGrid(np.array([1.0, 1.0]))
