"""Deterministic policy extraction and closed-loop analysis.

The LP solution is turned into one action per mass-carrying cell by the
smallest-index rule over occupation measures above a positivity threshold;
the closed-loop matrix selects the corresponding row of each action's
restricted transfer matrix, and its Lyapunov measure and value vector are
obtained by direct sparse solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sla

from .certificate import (
    LyapunovMeasure,
    StabilityCertificate,
    solve_measure,
    spectral_radius,  # re-exported for callers  # noqa: F401
    verify_stability,
    _active_subchain,
)
from .errors import DegenerateSolutionError, UsageError
from .lp_core import LPSolution, LPTolerances
from .pf_builder import TransferEnsemble, TransferMatrix

NO_ACTION = -1


@dataclass(frozen=True)
class Policy:
    """Per-cell deterministic feedback: an action index for every ordinary
    cell, :data:`NO_ACTION` at the sink (and anywhere actions are undefined)."""

    action_index: np.ndarray     # (n_restricted,) int
    control_values: np.ndarray   # ordered control values, one per action

    def __post_init__(self):
        idx = np.asarray(self.action_index, dtype=np.int64)
        vals = np.asarray(self.control_values, dtype=float)
        defined = idx != NO_ACTION
        if idx.ndim != 1 or (defined.any() and (idx[defined].min() < 0 or idx[defined].max() >= vals.shape[0])):
            raise UsageError("policy action indices out of range")
        idx.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "action_index", idx)
        object.__setattr__(self, "control_values", vals)

    @property
    def n_restricted(self) -> int:
        return int(self.action_index.shape[0])

    def controls_per_cell(self) -> np.ndarray:
        """Control value per restricted index (NaN where no action)."""
        out = np.full(self.n_restricted, np.nan)
        defined = self.action_index != NO_ACTION
        out[defined] = self.control_values[self.action_index[defined]]
        return out


def uniform_policy(ensemble: TransferEnsemble, action: int = 0) -> Policy:
    """Policy applying one fixed action on every ordinary cell (baselines,
    single-action chains)."""
    idx = np.full(ensemble.n_restricted, int(action), dtype=np.int64)
    if ensemble.sink_index is not None:
        idx[ensemble.sink_index] = NO_ACTION
    return Policy(action_index=idx, control_values=ensemble.controls.values)


def extract_policy(solution: LPSolution, ensemble: TransferEnsemble,
                   tau: float | None = None) -> Policy:
    """Smallest action index with occupation above the threshold, per cell.

    ``tau`` defaults to ``1e-9 * max(theta)``. A mass-carrying cell where no
    action clears the threshold is a degenerate solution and raises; a
    silent fallback action would invalidate the certificate downstream.
    """
    if not solution.optimal:
        raise UsageError(f"cannot extract a policy from a {solution.status} solution")
    theta = np.vstack(solution.theta)          # (M, n)
    if tau is None:
        tau = LPTolerances().tau_rel * float(theta.max(initial=0.0))
    support = theta > tau
    action = np.where(support.any(axis=0), support.argmax(axis=0), NO_ACTION)
    if ensemble.sink_index is not None:
        action[ensemble.sink_index] = NO_ACTION
    ordinary = ensemble.ordinary_cells
    missing = ordinary[action[ordinary] == NO_ACTION]
    if missing.size:
        raise DegenerateSolutionError(
            f"no action has occupation above tau={tau!r} at cell {int(missing[0])} "
            f"({missing.size} cells total)"
        )
    return Policy(action_index=action, control_values=ensemble.controls.values)


def closed_loop_matrix(policy: Policy, ensemble: TransferEnsemble) -> TransferMatrix:
    """Row-select each cell's chosen action; the sink row stays a self-loop."""
    n = ensemble.n_restricted
    if policy.n_restricted != n:
        raise UsageError("policy and ensemble sizes do not match")
    result = sparse.csr_matrix((n, n))
    for a in range(ensemble.n_actions):
        rows = (policy.action_index == a).astype(float)
        if not rows.any():
            continue
        selector = sparse.diags(rows, format="csr")
        result = result + selector @ ensemble.restricted[a].matrix
    if ensemble.sink_index is not None:
        s = ensemble.sink_index
        result = result + sparse.csr_matrix(
            (np.ones(1), (np.array([s]), np.array([s]))), shape=(n, n))
    result = sparse.csr_matrix(result)
    result.sum_duplicates()
    result.sort_indices()
    return TransferMatrix(matrix=result, kind="restricted")


def lyapunov_measure(closed_loop: TransferMatrix | sparse.spmatrix, mass: np.ndarray,
                     gamma: float, sink_index: int | None = None) -> LyapunovMeasure | None:
    """Measure of the controlled chain; ``None`` when the spectral condition
    ``rho(gamma P) < 1`` fails (not certifiable)."""
    mat = closed_loop.matrix if isinstance(closed_loop, TransferMatrix) else closed_loop
    return solve_measure(mat, mass, gamma, sink_index)


def evaluate_policy(policy: Policy, ensemble: TransferEnsemble, gamma: float) -> np.ndarray:
    """Value vector of a fixed policy: ``V = (I - gamma P_u)^{-1} G_u``.

    When ``gamma >= 1`` the sink's own series diverges, but an unreachable
    sink carries no mass, so it is excluded from the solve and reported at
    its one-step cost.
    """
    loop = closed_loop_matrix(policy, ensemble).matrix
    n = ensemble.n_restricted
    g_u = np.empty(n)
    for a in range(ensemble.n_actions):
        rows = policy.action_index == a
        g_u[rows] = ensemble.costs[a][rows]
    if ensemble.sink_index is not None:
        g_u[ensemble.sink_index] = ensemble.sink_penalty

    sub, keep = _active_subchain(loop, ensemble.sink_index if gamma >= 1.0 else None)
    rho = spectral_radius(gamma * sub)
    if rho >= 1.0 - 1e-10:
        raise UsageError(
            f"policy value is undefined: rho(gamma * P_u) = {rho!r} >= 1"
        )
    system = sparse.identity(sub.shape[0], format="csc") - gamma * sub.tocsc()
    lu = sla.splu(system)
    rhs = g_u[keep]
    v_sub = lu.solve(rhs)
    v_sub += lu.solve(rhs - system @ v_sub)
    value = np.empty(n)
    value[keep] = v_sub
    excluded = np.setdiff1d(np.arange(n), keep)
    value[excluded] = g_u[excluded]
    return value


def certify_policy(policy: Policy, ensemble: TransferEnsemble, gamma: float):
    """Stability certificate + Lyapunov measure for the closed loop.

    Returns ``(StabilityCertificate, LyapunovMeasure | None)``.
    """
    loop = closed_loop_matrix(policy, ensemble)
    return verify_stability(loop.matrix, ensemble.mass, gamma,
                            sink_index=ensemble.sink_index)


__all__ = [
    "NO_ACTION",
    "Policy",
    "LyapunovMeasure",
    "StabilityCertificate",
    "uniform_policy",
    "extract_policy",
    "closed_loop_matrix",
    "lyapunov_measure",
    "evaluate_policy",
    "certify_policy",
    "spectral_radius",
]
