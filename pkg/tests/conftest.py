import numpy as np
import pytest

import pfstab as pf

# Two-cell fixture with a known optimum: enumerating the four deterministic
# policies gives costs 2.5, 2.4, 2.4, 2.0; the winner picks action 2 on both
# cells with occupations (6, 4) and dual values (1.2, 0.8).
TINY_MATRICES = [
    np.array([[0.0, 0.5], [0.0, 0.0]]),
    np.array([[0.5, 0.5], [0.5, 0.0]]),
]
TINY_COSTS = [np.array([1.0, 1.0]), np.array([0.2, 0.2])]
TINY_MASS = np.array([1.0, 1.0])


@pytest.fixture
def tiny_ensemble():
    return pf.ensemble_from_matrices(
        TINY_MATRICES, TINY_COSTS, TINY_MASS, control_values=[1.0, 2.0]
    )


@pytest.fixture(scope="session")
def pendulum_bounds():
    return np.array([[-np.pi, np.pi], [-10.0, 10.0]])


@pytest.fixture(scope="session")
def small_pendulum(pendulum_bounds):
    """A coarse but complete Case-1 style synthesis, shared across tests."""
    counts = (16, 16)
    part = pf.build_grid(pendulum_bounds, counts, (True, False),
                         pf.default_attractor_region(pendulum_bounds, counts))
    system = pf.pendulum_model(dt=0.1, noise_channel="damping", velocity_limit=10.0)
    noise = pf.quantize_uniform_noise(0.1, 5)
    controls = pf.ControlGrid(np.arange(-80.0, 81.0, 20.0))
    ensemble = pf.build_ensemble(system, pf.quadratic_stage_cost(), part, controls,
                                 noise, samples_per_cell=4, seed=7)
    gamma = pf.largest_feasible_gamma(ensemble, (0.99, 1.0, 1.01, 1.05))
    solution = pf.solve_lp(pf.assemble_lp(ensemble, gamma))
    policy = pf.extract_policy(solution, ensemble)
    return {
        "partition": part,
        "system": system,
        "noise": noise,
        "controls": controls,
        "ensemble": ensemble,
        "gamma": gamma,
        "solution": solution,
        "policy": policy,
    }


def brute_force_policy_minimum(matrices, costs, mass, gamma, sink_index=None):
    """Test-local oracle: enumerate deterministic policies with dense algebra.

    Independent of the library's enumeration path: plain numpy, explicit
    loops, spectral test via eigvals.
    """
    import itertools

    mats = [np.asarray(m, dtype=float) for m in matrices]
    gs = [np.asarray(g, dtype=float) for g in costs]
    mass = np.asarray(mass, dtype=float)
    n = mass.shape[0]
    cells = [j for j in range(n) if sink_index is None or j != sink_index]
    best = None
    for assign in itertools.product(range(len(mats)), repeat=len(cells)):
        P = np.zeros((n, n))
        G = np.zeros(n)
        if sink_index is not None:
            P[sink_index] = mats[0][sink_index]
            G[sink_index] = gs[0][sink_index]
        for cell, a in zip(cells, assign):
            P[cell] = mats[a][cell]
            G[cell] = gs[a][cell]
        if np.max(np.abs(np.linalg.eigvals(gamma * P))) >= 1.0 - 1e-12:
            continue
        theta = np.linalg.solve(np.eye(n) - gamma * P.T, mass)
        if theta.min() < -1e-9:
            continue
        cost = float(G @ theta)
        if best is None or cost < best[0]:
            best = (cost, assign, theta)
    return best
