import numpy as np
import pytest

import pfstab as pf
from pfstab.errors import UsageError
from pfstab.lp_core import LPTolerances

from conftest import TINY_COSTS, TINY_MASS, TINY_MATRICES, brute_force_policy_minimum


def test_assemble_lp_shapes(tiny_ensemble):
    lp = pf.assemble_lp(tiny_ensemble, 1.0)
    A = lp.constraint_matrix()
    assert A.shape == (2, 4)
    assert lp.cost_vector().shape == (4,)
    with pytest.raises(UsageError):
        pf.assemble_lp(tiny_ensemble, -1.0)


def test_single_action_all_mass_exits():
    # P1 = 0: the constraint collapses to theta = m
    ens = pf.ensemble_from_matrices([np.zeros((2, 2))], [np.array([1.0, 1.0])],
                                    np.array([1.0, 1.0]))
    sol = pf.solve_lp(pf.assemble_lp(ens, 1.7))
    assert sol.optimal
    assert np.allclose(sol.theta[0], [1.0, 1.0])
    assert sol.primal_obj == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(sol.value, [1.0, 1.0])


def test_tiny_optimum_frozen_values(tiny_ensemble):
    sol = pf.solve_lp(pf.assemble_lp(tiny_ensemble, 1.0))
    assert sol.optimal
    assert sol.primal_obj == pytest.approx(2.0, abs=1e-8)
    assert np.allclose(sol.theta[0], [0.0, 0.0], atol=1e-9)
    assert np.allclose(sol.theta[1], [6.0, 4.0], atol=1e-8)
    assert np.allclose(sol.value, [1.2, 0.8], atol=1e-8)
    assert sol.duality_gap <= 1e-8
    assert sol.residual <= 1e-9 * (1.0 + TINY_MASS.max())


def test_tiny_against_test_oracle(tiny_ensemble):
    best = brute_force_policy_minimum(TINY_MATRICES, TINY_COSTS, TINY_MASS, 1.0)
    assert best is not None
    cost, assign, theta = best
    assert cost == pytest.approx(2.0, abs=1e-12)
    assert assign == (1, 1)
    assert np.allclose(theta, [6.0, 4.0])
    sol = pf.solve_lp(pf.assemble_lp(tiny_ensemble, 1.0))
    assert abs(sol.primal_obj - cost) <= 1e-8 * (1.0 + abs(cost))


def test_tiny_stays_feasible_at_large_gamma(tiny_ensemble):
    # the first action is nilpotent on this fixture, so every gamma admits a
    # drain policy; the optimum switches from (2,2) at gamma=1 to (1,1)
    probe = pf.feasibility_probe(tiny_ensemble, [1.0, 1.2, 1.3])
    assert all(status == "feasible" for _, status in probe)
    sol = pf.solve_lp(pf.assemble_lp(tiny_ensemble, 1.3))
    best = brute_force_policy_minimum(TINY_MATRICES, TINY_COSTS, TINY_MASS, 1.3)
    assert abs(sol.primal_obj - best[0]) <= 1e-8 * (1.0 + abs(best[0]))
    assert best[1] == (0, 0)


def test_probe_requires_sorted_gammas(tiny_ensemble):
    with pytest.raises(UsageError):
        pf.feasibility_probe(tiny_ensemble, [1.2, 1.0])


def test_scaling_invariance(tiny_ensemble):
    sol1 = pf.solve_lp(pf.assemble_lp(tiny_ensemble, 1.0))
    scaled = pf.ensemble_from_matrices(TINY_MATRICES, TINY_COSTS, 3.0 * TINY_MASS,
                                       control_values=[1.0, 2.0])
    sol3 = pf.solve_lp(pf.assemble_lp(scaled, 1.0))
    assert sol3.primal_obj == pytest.approx(3.0 * sol1.primal_obj, rel=1e-9)
    for a in range(2):
        assert np.allclose(sol3.theta[a], 3.0 * sol1.theta[a], atol=1e-8)
    assert np.allclose(sol3.value, sol1.value, atol=1e-8)


def _random_instance(rng, n, n_actions, leak=0.0):
    mats, costs = [], []
    for _ in range(n_actions):
        P = rng.random((n, n))
        scale = rng.uniform(0.3, 0.98, size=n) / P.sum(axis=1)
        P *= scale[:, None]
        mats.append(P)
        costs.append(rng.uniform(0.05, 2.0, size=n))
    mass = rng.uniform(0.2, 1.5, size=n)
    return mats, costs, mass


@pytest.mark.parametrize("gamma", [1.0, 1.05])
def test_randomized_instances_match_oracle(gamma):
    rng = np.random.default_rng(20240517)
    n_done = 0
    for trial in range(25):
        n = int(rng.integers(2, 5))
        M = int(rng.integers(1, 4))
        mats, costs, mass = _random_instance(rng, n, M)
        ens = pf.ensemble_from_matrices(mats, costs, mass)
        sol = pf.solve_lp(pf.assemble_lp(ens, gamma))
        best = brute_force_policy_minimum(mats, costs, mass, gamma)
        if sol.status == "infeasible":
            assert best is None
            continue
        assert best is not None, "LP optimal but enumeration found no feasible policy"
        assert abs(sol.primal_obj - best[0]) <= 1e-8 * (1.0 + abs(best[0]))
        # the library's enumeration path agrees with the independent oracle
        lib_cost, lib_assign, _ = pf.solve_by_policy_enumeration(pf.assemble_lp(ens, gamma))
        assert lib_cost == pytest.approx(best[0], rel=1e-12)
        n_done += 1
    assert n_done >= 20


def test_duality_audits_on_random_instances():
    rng = np.random.default_rng(7)
    tol = LPTolerances()
    for _ in range(10):
        mats, costs, mass = _random_instance(rng, 4, 3)
        ens = pf.ensemble_from_matrices(mats, costs, mass)
        lp = pf.assemble_lp(ens, 1.0)
        sol = pf.solve_lp(lp)
        assert sol.optimal
        # dual feasibility: V <= gamma P V + G componentwise, every action
        for a in range(3):
            slack = lp.gamma * (lp.matrices[a] @ sol.value) + lp.costs[a] - sol.value
            assert slack.min() >= -1e-7 * (1.0 + np.abs(sol.value).max())
        # complementary slackness: every cell has an active tight action
        tau = tol.tau_rel * max(th.max() for th in sol.theta)
        for j in range(4):
            active = [
                a for a in range(3)
                if sol.theta[a][j] > tau and abs(
                    (lp.gamma * (lp.matrices[a] @ sol.value) + lp.costs[a] - sol.value)[j]
                ) <= tol.slack_tol * (1.0 + np.abs(sol.value).max())
            ]
            assert active, f"no active action at cell {j}"


def test_leak_diagnostic_and_infeasibility():
    # cell 1 leaks under both actions; with mass required everywhere the LP
    # is infeasible for gamma >= 1 and the diagnostic names the culprit
    P1 = np.array([[0.5, 0.2, 0.0], [0.0, 0.2, 0.5], [0.0, 0.0, 1.0]])
    P2 = np.array([[0.2, 0.3, 0.0], [0.1, 0.1, 0.3], [0.0, 0.0, 1.0]])
    costs = [np.array([1.0, 1.0, 1e6]), np.array([2.0, 2.0, 1e6])]
    mass = np.array([1.0, 1.0, 0.0])
    ens = pf.ensemble_from_matrices([P1, P2], costs, mass, sink_index=2)
    lp = pf.assemble_lp(ens, 1.0)
    leaks = pf.leak_diagnostic(lp)
    assert list(leaks) == [1]
    sol = pf.solve_lp(lp)
    assert sol.status == "infeasible"
    assert sol.leak_cells == (1,)
    assert "leak" in sol.diagnostic
    # below one the same instance becomes feasible (discounted regime)
    probe = pf.feasibility_probe(ens, [0.9, 1.0, 1.1])
    assert probe[0][1] == "feasible"
    assert probe[1][1] == "infeasible"


def test_sink_elimination_matches_plain_path():
    # gamma < 1 with a sink: the presolved solve must agree with the direct
    # formulation and reconstruct the sink occupation exactly
    P1 = np.array([[0.4, 0.2, 0.1], [0.1, 0.3, 0.2], [0.0, 0.0, 1.0]])
    P2 = np.array([[0.2, 0.2, 0.0], [0.3, 0.3, 0.1], [0.0, 0.0, 1.0]])
    costs = [np.array([1.0, 2.0, 50.0]), np.array([1.5, 0.5, 50.0])]
    mass = np.array([1.0, 2.0, 0.0])
    ens = pf.ensemble_from_matrices([P1, P2], costs, mass, sink_index=2)
    gamma = 0.9
    sol = pf.solve_lp(pf.assemble_lp(ens, gamma))  # uses the eliminated path
    assert sol.optimal

    # direct dense reference: solve the full LP with scipy on the raw blocks
    from scipy.optimize import linprog
    A = np.hstack([gamma * P1.T - np.eye(3), gamma * P2.T - np.eye(3)])
    res = linprog(np.concatenate(costs), A_eq=A, b_eq=-mass, bounds=(0, None),
                  method="highs")
    assert res.status == 0
    assert sol.primal_obj == pytest.approx(res.fun, rel=1e-9)
    assert np.allclose(sol.value, -res.eqlin.marginals, atol=1e-7 * (1 + abs(res.fun)))
    # sink occupation follows its balance row: theta_s = gamma*inflow/(1-gamma)
    inflow = sum(float(P[:2, 2] @ th[:2]) for P, th in zip((P1, P2), sol.theta))
    total_sink = sum(th[2] for th in sol.theta)
    assert total_sink == pytest.approx(gamma * inflow / (1.0 - gamma), rel=1e-9)


def test_export_lp_round_trip(tmp_path, tiny_ensemble):
    lp = pf.assemble_lp(tiny_ensemble, 1.0)
    path = str(tmp_path / "tiny.pflp")
    pf.export_lp(lp, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "pflp 1 4 2"
    assert "minimize" in lines and "rhs" in lines and lines[-1] == "end"
    # reconstruct the constraint matrix from the file and compare
    k = lines.index("minimize")
    e = next(i for i, ln in enumerate(lines) if ln.startswith("equality"))
    r = lines.index("rhs")
    A = np.zeros((2, 4))
    for ln in lines[e + 1:r]:
        i, j, v = ln.split()
        A[int(i), int(j)] = float(v)
    assert np.allclose(A, lp.constraint_matrix().toarray())
    b = np.zeros(2)
    for ln in lines[r + 1:lines.index("bounds nonneg")]:
        i, v = ln.split()
        b[int(i)] = float(v)
    assert np.allclose(b, -lp.mass)
