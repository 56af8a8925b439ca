"""Almost-everywhere stability certificates for substochastic chains.

Given a restricted transfer matrix ``P1`` (attractor removed), a reference
mass vector ``m``, and a decay parameter ``gamma``, the chain is certified
when ``rho(gamma * P1) < 1``; the certificate's witness is the measure

    mu = (I - gamma * P1')^{-1} m  >=  m  >=  0,

the unique solution of ``gamma * P1' mu - mu = -m``. A failed certificate
reports the spectral radius and the support of the dominant eigenvector
(the candidate non-decaying region).

This module is self-contained: it knows nothing about control or LPs and
accepts any substochastic matrix (for example one read from a pfmat file).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sla

from .errors import UsageError

SPECTRAL_MARGIN = 1e-10

CERTIFIED = "certified"
NOT_CERTIFIED = "not-certified"


@dataclass(frozen=True)
class LyapunovMeasure:
    """Nonnegative measure solving ``gamma P' mu - mu = -m`` with its residual."""

    mu: np.ndarray
    residual: float
    gamma: float


@dataclass(frozen=True)
class StabilityCertificate:
    spectral_radius: float        # rho(gamma * P1)
    decay_bound: float            # rho(P1)
    gamma: float
    verdict: str                  # certified | not-certified
    diagnostic: tuple = ()        # dominant-eigenvector support when not certified

    @property
    def certified(self) -> bool:
        return self.verdict == CERTIFIED


@dataclass(frozen=True)
class VerificationProblem:
    """Inputs for standalone verification of an autonomous chain."""

    matrix: sparse.csr_matrix
    mass: np.ndarray
    gamma: float
    sink_index: int | None = None

    def __post_init__(self):
        mat = sparse.csr_matrix(self.matrix)
        mass = np.asarray(self.mass, dtype=float)
        if mat.shape[0] != mat.shape[1] or mat.shape[0] != mass.shape[0]:
            raise UsageError("matrix and mass vector sizes do not match")
        if mat.nnz and mat.data.min() < -1e-15:
            raise UsageError("transfer matrix must be nonnegative")
        if np.any(np.asarray(mat.sum(axis=1)).ravel() > 1.0 + 1e-9):
            raise UsageError("transfer matrix must be row substochastic")
        if np.any(mass < 0):
            raise UsageError("mass vector must be nonnegative")
        if not np.isfinite(self.gamma) or self.gamma <= 0:
            raise UsageError("gamma must be positive and finite")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "mass", mass)


def spectral_radius(matrix, tol: float = 1e-10, maxiter: int = 10_000,
                    return_vector: bool = False):
    """Spectral radius of a nonnegative matrix by power iteration.

    The iteration runs on ``A + I`` (the unit shift makes periodic chains
    converge) and reports the estimate minus one. Falls back to a direct
    eigenvalue computation on the rare non-converged instance.
    """
    A = sparse.csr_matrix(matrix)
    n = A.shape[0]
    if n == 0:
        return (0.0, np.zeros(0)) if return_vector else 0.0
    x = np.full(n, 1.0 / n)
    est = 0.0
    for _ in range(maxiter):
        y = x + A @ x
        norm = y.sum()
        if norm <= 0.0:
            return (0.0, x) if return_vector else 0.0
        new_est = norm / x.sum()
        y /= norm
        done = abs(new_est - est) <= tol * max(1.0, abs(new_est))
        x, est = y, new_est
        if done:
            break
    else:
        est = _spectral_radius_direct(A) + 1.0
    rho = max(est - 1.0, 0.0)
    return (rho, x) if return_vector else rho


def _spectral_radius_direct(A: sparse.csr_matrix) -> float:
    n = A.shape[0]
    if n <= 2000:
        return float(np.max(np.abs(np.linalg.eigvals(np.asarray(A.todense())))))
    vals = sla.eigs(A.astype(float), k=1, which="LM", return_eigenvectors=False,
                    maxiter=50 * n, tol=1e-12)
    return float(np.abs(vals[0]))


def sink_inflow(matrix: sparse.csr_matrix, sink_index: int) -> float:
    """Total off-diagonal mass entering the sink column."""
    col = np.asarray(matrix[:, sink_index].todense()).ravel()
    col[sink_index] = 0.0
    return float(col.sum())


def _active_subchain(matrix: sparse.csr_matrix, sink_index: int | None):
    """Drop an unreachable sink (zero inflow) from the chain.

    The sink's unit self-loop pins ``rho`` at 1 even when no mass can ever
    reach it; excluding it is exact because the sink carries no reference
    mass and is isolated. Returns ``(submatrix, kept_indices)``.
    """
    n = matrix.shape[0]
    keep = np.arange(n)
    if sink_index is not None and sink_inflow(matrix, sink_index) == 0.0:
        keep = keep[keep != sink_index]
        matrix = sparse.csr_matrix(matrix[np.ix_(keep, keep)])
    return matrix, keep


def solve_measure(matrix: sparse.csr_matrix, mass: np.ndarray, gamma: float,
                  sink_index: int | None = None) -> LyapunovMeasure | None:
    """Solve ``(I - gamma P') mu = m``; ``None`` when the chain is not
    certifiable (``rho(gamma P) >= 1``)."""
    sub, keep = _active_subchain(sparse.csr_matrix(matrix), sink_index)
    rho = spectral_radius(gamma * sub)
    if rho >= 1.0 - SPECTRAL_MARGIN:
        return None
    n_sub = sub.shape[0]
    system = (sparse.identity(n_sub, format="csc") - gamma * sub.T.tocsc())
    rhs = np.asarray(mass, dtype=float)[keep]
    try:
        lu = sla.splu(system)
        mu_sub = lu.solve(rhs)
        mu_sub += lu.solve(rhs - system @ mu_sub)  # one refinement step
    except RuntimeError:
        return None
    n = matrix.shape[0]
    mu = np.zeros(n)
    mu[keep] = mu_sub
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(mu))))
    mu[(mu < 0) & (mu > -tiny)] = 0.0
    if mu.min() < 0:
        return None
    residual = float(np.max(np.abs(gamma * (matrix.T @ mu) - mu + np.asarray(mass))))
    return LyapunovMeasure(mu=mu, residual=residual, gamma=gamma)


def verify_stability(matrix, mass, gamma: float, sink_index: int | None = None):
    """Certify a.e. stability of an autonomous substochastic chain.

    Returns ``(certificate, measure)``; ``measure`` is ``None`` exactly when
    the verdict is not-certified.
    """
    problem = VerificationProblem(matrix=matrix, mass=mass, gamma=gamma,
                                  sink_index=sink_index)
    sub, keep = _active_subchain(problem.matrix, problem.sink_index)
    rho_base, vec = spectral_radius(sub, return_vector=True)
    rho_scaled = gamma * rho_base
    if rho_scaled >= 1.0 - SPECTRAL_MARGIN:
        support = keep[vec > max(1e-8, 0.01 * vec.max())]
        cert = StabilityCertificate(
            spectral_radius=rho_scaled, decay_bound=rho_base, gamma=gamma,
            verdict=NOT_CERTIFIED, diagnostic=tuple(int(i) for i in support),
        )
        return cert, None
    measure = solve_measure(problem.matrix, problem.mass, gamma, problem.sink_index)
    if measure is None:
        cert = StabilityCertificate(
            spectral_radius=rho_scaled, decay_bound=rho_base, gamma=gamma,
            verdict=NOT_CERTIFIED, diagnostic=(),
        )
        return cert, None
    cert = StabilityCertificate(
        spectral_radius=rho_scaled, decay_bound=rho_base, gamma=gamma,
        verdict=CERTIFIED,
    )
    return cert, measure


def neumann_partial_sums(matrix, mass, gamma: float, terms: int) -> np.ndarray:
    """Partial sums ``S_k = sum_{n<=k} gamma^n (P')^n m`` for k = 0..terms.

    The sums are componentwise nondecreasing; when ``rho(gamma P) < 1`` they
    converge to the Lyapunov measure, which is the cross-check used by the
    certificate tests.
    """
    P = sparse.csr_matrix(matrix)
    m = np.asarray(mass, dtype=float)
    sums = np.empty((terms + 1, m.shape[0]))
    term = m.copy()
    acc = m.copy()
    sums[0] = acc
    for k in range(1, terms + 1):
        term = gamma * (P.T @ term)
        acc = acc + term
        sums[k] = acc
    return sums
