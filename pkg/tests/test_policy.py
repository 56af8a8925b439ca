import numpy as np
import pytest

import pfstab as pf
from pfstab.errors import DegenerateSolutionError, UsageError
from pfstab.lp_core import LPSolution

from conftest import TINY_COSTS, TINY_MASS, TINY_MATRICES, brute_force_policy_minimum


@pytest.fixture
def tiny_solution(tiny_ensemble):
    return pf.solve_lp(pf.assemble_lp(tiny_ensemble, 1.0))


def test_extract_policy_tiny(tiny_solution, tiny_ensemble):
    policy = pf.extract_policy(tiny_solution, tiny_ensemble)
    assert list(policy.action_index) == [1, 1]
    assert np.allclose(policy.controls_per_cell(), [2.0, 2.0])


def test_min_index_tie_break(tiny_ensemble):
    fake = LPSolution(status="optimal", gamma=1.0,
                      theta=(np.array([0.3, 0.0]), np.array([0.7, 1.0])),
                      value=np.zeros(2), primal_obj=0.0, dual_obj=0.0,
                      residual=0.0, duality_gap=0.0)
    policy = pf.extract_policy(fake, tiny_ensemble)
    assert list(policy.action_index) == [0, 1]


def test_threshold_treats_dust_as_zero(tiny_ensemble):
    fake = LPSolution(status="optimal", gamma=1.0,
                      theta=(np.array([1e-12, 0.0]), np.array([6.0, 4.0])),
                      value=np.zeros(2), primal_obj=0.0, dual_obj=0.0,
                      residual=0.0, duality_gap=0.0)
    policy = pf.extract_policy(fake, tiny_ensemble)
    assert list(policy.action_index) == [1, 1]


def test_empty_support_is_degenerate(tiny_ensemble):
    fake = LPSolution(status="optimal", gamma=1.0,
                      theta=(np.array([0.0, 0.0]), np.array([6.0, 0.0])),
                      value=np.zeros(2), primal_obj=0.0, dual_obj=0.0,
                      residual=0.0, duality_gap=0.0)
    with pytest.raises(DegenerateSolutionError, match="cell 1"):
        pf.extract_policy(fake, tiny_ensemble)


def test_closed_loop_rows(tiny_solution, tiny_ensemble):
    policy = pf.extract_policy(tiny_solution, tiny_ensemble)
    loop = pf.closed_loop_matrix(policy, tiny_ensemble)
    assert np.allclose(loop.matrix.toarray(), [[0.5, 0.5], [0.5, 0.0]])
    mixed = pf.Policy(action_index=np.array([0, 1]), control_values=np.array([1.0, 2.0]))
    loop2 = pf.closed_loop_matrix(mixed, tiny_ensemble)
    assert np.allclose(loop2.matrix.toarray(), [[0.0, 0.5], [0.5, 0.0]])
    single = pf.ensemble_from_matrices([TINY_MATRICES[0]], [TINY_COSTS[0]], TINY_MASS)
    loop3 = pf.closed_loop_matrix(pf.uniform_policy(single), single)
    assert np.allclose(loop3.matrix.toarray(), TINY_MATRICES[0])


def test_lyapunov_measure_tiny(tiny_solution, tiny_ensemble):
    policy = pf.extract_policy(tiny_solution, tiny_ensemble)
    loop = pf.closed_loop_matrix(policy, tiny_ensemble)
    measure = pf.lyapunov_measure(loop, tiny_ensemble.mass, 1.0)
    assert measure is not None
    assert np.allclose(measure.mu, [6.0, 4.0], atol=1e-10)
    assert measure.residual <= 1e-9 * (1.0 + TINY_MASS.max())
    # occupation identity: unique support per cell means mu equals sum theta
    total = tiny_solution.theta_total()
    assert np.allclose(measure.mu, total, atol=1e-7)


def test_lyapunov_measure_trivial_and_failing():
    from scipy import sparse
    zero = sparse.csr_matrix((2, 2))
    m = np.array([0.3, 0.7])
    measure = pf.lyapunov_measure(zero, m, 5.0)
    assert np.allclose(measure.mu, m)
    # gamma*rho >= 1 gives no measure
    loop = sparse.csr_matrix(np.array([[0.5, 0.5], [0.5, 0.0]]))
    assert pf.lyapunov_measure(loop, m, 1.3) is None


def test_spectral_radius_matches_dense_eig():
    rng = np.random.default_rng(5)
    for n in (2, 5, 9):
        A = rng.random((n, n))
        A /= A.sum(axis=1).max() * rng.uniform(1.0, 2.0)
        want = float(np.max(np.abs(np.linalg.eigvals(A))))
        got = pf.spectral_radius(A)
        assert got == pytest.approx(want, abs=1e-8)
    # periodic chain: the unit shift keeps the iteration convergent
    perm = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert pf.spectral_radius(perm) == pytest.approx(1.0, abs=1e-9)
    assert pf.spectral_radius(np.zeros((3, 3))) == 0.0


def test_evaluate_policy_tiny(tiny_solution, tiny_ensemble):
    policy = pf.extract_policy(tiny_solution, tiny_ensemble)
    value = pf.evaluate_policy(policy, tiny_ensemble, 1.0)
    assert np.allclose(value, [1.2, 0.8], atol=1e-10)
    assert np.allclose(value, tiny_solution.value, atol=1e-6 * (1 + 0.8))
    # objective consistency through the mass vector
    assert TINY_MASS @ value == pytest.approx(tiny_solution.primal_obj, rel=1e-6)


def test_evaluate_suboptimal_policy(tiny_ensemble, tiny_solution):
    policy = pf.Policy(action_index=np.array([0, 0]), control_values=np.array([1.0, 2.0]))
    value = pf.evaluate_policy(policy, tiny_ensemble, 1.0)
    # hand computation: V2 = 1, V1 = 1 + 0.5 * V2
    assert np.allclose(value, [1.5, 1.0], atol=1e-10)
    assert TINY_MASS @ value >= tiny_solution.primal_obj - 1e-9


def test_evaluate_policy_p_zero(tiny_ensemble):
    single = pf.ensemble_from_matrices([np.zeros((2, 2))], [np.array([1.0, 2.0])],
                                       TINY_MASS)
    value = pf.evaluate_policy(pf.uniform_policy(single), single, 1.0)
    assert np.allclose(value, [1.0, 2.0])


def test_evaluate_policy_spectral_failure(tiny_ensemble):
    policy = pf.Policy(action_index=np.array([1, 1]), control_values=np.array([1.0, 2.0]))
    with pytest.raises(UsageError):
        pf.evaluate_policy(policy, tiny_ensemble, 1.3)


def test_certify_policy_tiny(tiny_solution, tiny_ensemble):
    policy = pf.extract_policy(tiny_solution, tiny_ensemble)
    cert, measure = pf.certify_policy(policy, tiny_ensemble, 1.0)
    assert cert.certified
    assert cert.spectral_radius == pytest.approx(0.8090169943749475, abs=1e-8)
    assert cert.decay_bound == pytest.approx(0.8090169943749475, abs=1e-8)
    assert measure is not None and np.allclose(measure.mu, [6.0, 4.0], atol=1e-9)
    # monotonicity mu >= m at gamma >= 1
    assert np.all(measure.mu >= tiny_ensemble.mass - 1e-12)

    cert13, measure13 = pf.certify_policy(policy, tiny_ensemble, 1.3)
    assert not cert13.certified
    assert measure13 is None
    assert cert13.spectral_radius == pytest.approx(1.3 * 0.8090169943749475, abs=1e-6)


def test_measure_monotone_in_mass(tiny_solution, tiny_ensemble):
    policy = pf.extract_policy(tiny_solution, tiny_ensemble)
    loop = pf.closed_loop_matrix(policy, tiny_ensemble)
    m1 = pf.lyapunov_measure(loop, tiny_ensemble.mass, 1.0)
    m2 = pf.lyapunov_measure(loop, 2.5 * tiny_ensemble.mass, 1.0)
    assert np.allclose(m2.mu, 2.5 * m1.mu, rtol=1e-12)


def test_unreachable_sink_does_not_block_certificate():
    # a sink with zero inflow sits outside the reachable chain; its unit
    # self-loop must not force rho to 1
    P = np.array([[0.4, 0.3, 0.0], [0.2, 0.1, 0.0], [0.0, 0.0, 1.0]])
    ens = pf.ensemble_from_matrices([P], [np.array([1.0, 1.0, 1e6])],
                                    np.array([1.0, 1.0, 0.0]), sink_index=2)
    policy = pf.uniform_policy(ens)
    cert, measure = pf.certify_policy(policy, ens, 1.05)
    assert cert.certified
    assert cert.spectral_radius < 1.0
    assert measure.mu[2] == 0.0
    # with inflow the self-loop is genuine and blocks certification
    P_leak = np.array([[0.4, 0.3, 0.2], [0.2, 0.1, 0.0], [0.0, 0.0, 1.0]])
    ens2 = pf.ensemble_from_matrices([P_leak], [np.array([1.0, 1.0, 1e6])],
                                     np.array([1.0, 1.0, 0.0]), sink_index=2)
    cert2, measure2 = pf.certify_policy(pf.uniform_policy(ens2), ens2, 1.05)
    assert not cert2.certified
