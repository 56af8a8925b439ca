"""Assembly and solution of the finite-dimensional stabilization LP.

Primal (occupation measures theta^a >= 0, one block per action)::

    min   sum_a (G^a)' theta^a
    s.t.  gamma * sum_a (P1_a)' theta^a - sum_a theta^a = -m

Dual (per-cell values V)::

    max   m' V
    s.t.  V <= gamma * P1_a V + G^a   for every action a

Strong duality and complementary slackness are audited on every solve;
the solver must surface true dual multipliers, not only the primal point.
A brute-force deterministic-policy enumeration is provided as an
independent cross-check path for small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from ._io import atomic_write_text, fmt_float
from .errors import SolverError, UsageError
from .pf_builder import TransferEnsemble

_STATUS = {0: "optimal", 1: "iteration-limit", 2: "infeasible", 3: "unbounded", 4: "solver-error"}


@dataclass(frozen=True)
class LPTolerances:
    """Scale-aware solve and audit tolerances (double-precision defaults)."""

    feas_rel: float = 1e-9
    gap_tol: float = 1e-8
    slack_tol: float = 1e-7
    tau_rel: float = 1e-9

    def feas_tol(self, scale: float) -> float:
        return self.feas_rel * (1.0 + scale)


@dataclass(frozen=True)
class StabilizationLP:
    """Sparse LP data: restricted matrices, costs, mass, and gamma."""

    gamma: float
    matrices: tuple          # restricted csr matrices, one per action
    costs: tuple             # per-action cost vectors, length n
    mass: np.ndarray
    sink_index: int | None = None

    @property
    def n(self) -> int:
        return int(self.mass.shape[0])

    @property
    def n_actions(self) -> int:
        return len(self.matrices)

    @property
    def ordinary_cells(self) -> np.ndarray:
        idx = np.arange(self.n)
        if self.sink_index is None:
            return idx
        return idx[idx != self.sink_index]

    def constraint_matrix(self) -> sparse.csc_matrix:
        """Equality constraint blocks ``[gamma * P_a' - I | ...]`` as CSC."""
        eye = sparse.identity(self.n, format="csc")
        blocks = [self.gamma * mat.T.tocsc() - eye for mat in self.matrices]
        return sparse.hstack(blocks, format="csc")

    def cost_vector(self) -> np.ndarray:
        return np.concatenate(self.costs)


@dataclass(frozen=True)
class LPSolution:
    """Primal/dual pair with duality audit data."""

    status: str
    gamma: float
    theta: tuple | None = None       # per-action occupation vectors
    value: np.ndarray | None = None  # dual vector V
    primal_obj: float = np.nan
    dual_obj: float = np.nan
    residual: float = np.nan         # ||gamma sum P' theta - sum theta + m||_inf
    duality_gap: float = np.nan
    diagnostic: str = ""
    leak_cells: tuple = ()

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def theta_total(self) -> np.ndarray:
        return np.sum(self.theta, axis=0)


def assemble_lp(ensemble: TransferEnsemble, gamma: float) -> StabilizationLP:
    """Build the LP from a validated ensemble."""
    if not np.isfinite(gamma) or gamma <= 0:
        raise UsageError("gamma must be a positive finite number")
    return StabilizationLP(
        gamma=float(gamma),
        matrices=tuple(tm.matrix for tm in ensemble.restricted),
        costs=tuple(ensemble.costs),
        mass=np.asarray(ensemble.mass, dtype=float),
        sink_index=ensemble.sink_index,
    )


def leak_diagnostic(lp: StabilizationLP) -> np.ndarray:
    """Cells from which every action sends mass to the sink.

    Such cells make the LP infeasible for every gamma >= 1, which is the
    dominant practical cause of infeasibility; returns their indices.
    """
    if lp.sink_index is None:
        return np.empty(0, dtype=np.int64)
    leak_everywhere = None
    for mat in lp.matrices:
        col = np.asarray(mat[:, lp.sink_index].todense()).ravel()
        col[lp.sink_index] = 0.0  # the sink's own self-loop is not a leak
        leaks = col > 0
        leak_everywhere = leaks if leak_everywhere is None else (leak_everywhere & leaks)
    return np.nonzero(leak_everywhere)[0]


def _linprog_robust(c, A, b):
    """HiGHS simplex first; fall back to interior point (with crossover) on
    numerical breakdown. Both surface true equality multipliers."""
    res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if res.status == 4:
        res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs-ipm")
    return res


def _sink_is_absorbing(lp: StabilizationLP) -> bool:
    s = lp.sink_index
    for mat in lp.matrices:
        row = mat.getrow(s)
        if row.nnz != 1 or row.indices[0] != s or abs(row.data[0] - 1.0) > 1e-12:
            return False
    return True


def _solve_sink_eliminated(lp: StabilizationLP):
    """Solve with the sink variable substituted out (exact presolve).

    For ``gamma < 1`` the sink's balance row pins ``theta_sink =
    gamma * inflow / (1 - gamma)``, so the sink column (whose diagonal entry
    ``gamma - 1`` is nearly zero and ruins simplex conditioning near
    ``gamma = 1``) can be eliminated by charging each leaking transition its
    discounted sink cost directly. The reconstructed solution satisfies the
    original system exactly.
    """
    n, M = lp.n, lp.n_actions
    s = lp.sink_index
    keep = np.array([j for j in range(n) if j != s])
    pen = min(float(lp.costs[a][s]) for a in range(M))
    charge = pen * lp.gamma / (1.0 - lp.gamma)

    mats, costs, leaks = [], [], []
    for a in range(M):
        Pa = lp.matrices[a]
        leak = np.asarray(Pa[:, s].todense()).ravel()[keep]
        leaks.append(leak)
        mats.append(sparse.csr_matrix(Pa[np.ix_(keep, keep)]))
        costs.append(np.asarray(lp.costs[a])[keep] + charge * leak)
    eye = sparse.identity(keep.size, format="csc")
    A = sparse.hstack([lp.gamma * Pm.T.tocsc() - eye for Pm in mats], format="csc")
    res = _linprog_robust(np.concatenate(costs), A, -lp.mass[keep])
    if res.status != 0:
        return res, None, None

    nk = keep.size
    theta = []
    inflow = 0.0
    for a in range(M):
        th = np.zeros(n)
        th[keep] = res.x[a * nk:(a + 1) * nk]
        inflow += float(leaks[a] @ th[keep])
        theta.append(th)
    theta[0][s] = lp.gamma * inflow / (1.0 - lp.gamma)
    value = np.empty(n)
    value[keep] = -np.asarray(res.eqlin.marginals, dtype=float)
    value[s] = pen / (1.0 - lp.gamma)
    return res, tuple(theta), value


def solve_lp(lp: StabilizationLP, tolerances: LPTolerances | None = None) -> LPSolution:
    """Solve the LP to optimality and audit duality.

    Returns an :class:`LPSolution` whose ``status`` is ``optimal``,
    ``infeasible``, or ``unbounded``. On ``optimal`` the dual vector is the
    true equality multiplier vector and the strong-duality, dual-feasibility,
    and complementary-slackness audits have passed.
    """
    tol = tolerances or LPTolerances()
    n, M = lp.n, lp.n_actions

    theta = value = None
    if lp.sink_index is not None and lp.gamma < 1.0 and _sink_is_absorbing(lp):
        res, theta, value = _solve_sink_eliminated(lp)
    else:
        res = _linprog_robust(lp.cost_vector(), lp.constraint_matrix(), -lp.mass)

    if res.status == 2:
        leaks = leak_diagnostic(lp)
        detail = (
            f"{leaks.size} cells leak to the sink under every action"
            if leaks.size
            else res.message
        )
        return LPSolution(status="infeasible", gamma=lp.gamma,
                          diagnostic=detail, leak_cells=tuple(int(i) for i in leaks))
    if res.status == 3:
        return LPSolution(status="unbounded", gamma=lp.gamma, diagnostic=res.message)
    if res.status != 0:
        raise SolverError(f"LP solver breakdown: {res.message}")

    if theta is None:
        theta = tuple(res.x[a * n:(a + 1) * n].copy() for a in range(M))
        # scipy reports the sensitivity dz/db; our value flips sign with b = -m
        value = -np.asarray(res.eqlin.marginals, dtype=float)

    total = np.sum(theta, axis=0)
    flow = sum(lp.gamma * (mat.T @ th) for mat, th in zip(lp.matrices, theta))
    residual = float(np.max(np.abs(flow - total + lp.mass)))
    primal_obj = float(sum(g @ th for g, th in zip(lp.costs, theta)))
    dual_obj = float(lp.mass @ value)
    gap = abs(primal_obj - dual_obj)

    theta_scale = float(total.max(initial=0.0))
    if residual > tol.feas_tol(theta_scale):
        raise SolverError(
            f"primal residual {residual:.3e} exceeds tolerance at gamma={lp.gamma}"
        )
    if gap > tol.gap_tol * (1.0 + abs(primal_obj)):
        raise SolverError(
            f"duality gap {gap:.3e} exceeds tolerance (objectives {primal_obj!r}, {dual_obj!r})"
        )
    value_scale = float(np.max(np.abs(value), initial=0.0))
    dual_slack_tol = tol.feas_tol(value_scale)
    for a in range(M):
        slack = lp.gamma * (lp.matrices[a] @ value) + lp.costs[a] - value
        if slack.min(initial=0.0) < -dual_slack_tol:
            raise SolverError(
                f"dual vector violates feasibility for action {a} "
                f"(worst slack {slack.min():.3e})"
            )
    _check_complementary_slackness(lp, theta, value, tol)

    return LPSolution(status="optimal", gamma=lp.gamma, theta=theta, value=value,
                      primal_obj=primal_obj, dual_obj=dual_obj,
                      residual=residual, duality_gap=gap)


def _check_complementary_slackness(lp: StabilizationLP, theta, value,
                                   tol: LPTolerances) -> None:
    """Every mass-carrying cell needs an active action: positive occupation
    with a tight dual constraint."""
    theta_scale = float(np.max(np.sum(theta, axis=0), initial=0.0))
    tau = tol.tau_rel * theta_scale
    value_scale = float(np.max(np.abs(value), initial=0.0))
    slack_tol = tol.slack_tol * (1.0 + value_scale)
    cells = lp.ordinary_cells
    ok = np.zeros(lp.n, dtype=bool)
    for a in range(lp.n_actions):
        slack = lp.gamma * (lp.matrices[a] @ value) + lp.costs[a] - value
        ok |= (theta[a] > tau) & (np.abs(slack) <= slack_tol)
    if not np.all(ok[cells]):
        bad = cells[~ok[cells]][0]
        raise SolverError(
            f"complementary slackness fails at cell {int(bad)}: "
            "no action with positive occupation and tight dual constraint"
        )


def feasibility_probe(ensemble: TransferEnsemble, gamma_list) -> list[tuple[float, str]]:
    """Feasibility status per gamma (ascending); brackets the feasibility
    threshold from below by the largest feasible value found."""
    gammas = [float(g) for g in gamma_list]
    if sorted(gammas) != gammas:
        raise UsageError("gamma_list must be sorted ascending")
    out = []
    for g in gammas:
        lp = assemble_lp(ensemble, g)
        A = lp.constraint_matrix()
        # feasibility only: zero objective
        res = linprog(np.zeros(A.shape[1]), A_eq=A, b_eq=-lp.mass,
                      bounds=(0, None), method="highs")
        out.append((g, "feasible" if res.status == 0 else "infeasible"))
    return out


def largest_feasible_gamma(ensemble: TransferEnsemble, gamma_list) -> float | None:
    """Largest gamma in ``gamma_list`` for which the LP is feasible."""
    feasible = [g for g, status in feasibility_probe(ensemble, sorted(gamma_list))
                if status == "feasible"]
    return max(feasible) if feasible else None


def solve_by_policy_enumeration(lp: StabilizationLP):
    """Brute-force minimum over deterministic policies (cross-check path).

    Enumerates every assignment of one action per mass-carrying cell,
    evaluates theta = (I - gamma P_u')^{-1} m when the spectral condition
    holds, and returns ``(best_cost, best_assignment, best_theta)`` or
    ``(None, None, None)`` when no deterministic policy is feasible.
    Exponential in the number of cells; intended for small instances.
    """
    n, M = lp.n, lp.n_actions
    cells = lp.ordinary_cells
    if M ** cells.size > 200_000:
        raise UsageError("policy enumeration is limited to small instances")
    dense = [np.asarray(mat.todense()) for mat in lp.matrices]
    costs = [np.asarray(g, dtype=float) for g in lp.costs]
    eye = np.eye(n)
    best_cost, best_assign, best_theta = None, None, None
    for assign in itertools.product(range(M), repeat=cells.size):
        P = np.zeros((n, n))
        G = np.zeros(n)
        full_assign = np.zeros(n, dtype=np.int64)
        for cell, a in zip(cells, assign):
            P[cell] = dense[a][cell]
            G[cell] = costs[a][cell]
            full_assign[cell] = a
        if lp.sink_index is not None:
            P[lp.sink_index] = dense[0][lp.sink_index]
            G[lp.sink_index] = costs[0][lp.sink_index]
        if np.max(np.abs(np.linalg.eigvals(lp.gamma * P))) >= 1.0 - 1e-12:
            continue
        theta = np.linalg.solve(eye - lp.gamma * P.T, lp.mass)
        if theta.min() < -1e-9:
            continue
        cost = float(G @ theta)
        if best_cost is None or cost < best_cost:
            best_cost, best_assign, best_theta = cost, full_assign, theta
    return best_cost, best_assign, best_theta


def export_lp(lp: StabilizationLP, path: str) -> None:
    """Write the LP in the documented sparse text form for external solvers.

    Layout (all indices 0-based)::

        pflp 1 <nvars> <ncons>
        minimize
        <var> <coef>            # one line per nonzero objective coefficient
        equality <nnz>
        <row> <var> <coef>      # constraint matrix entries, column-major
        rhs
        <row> <value>           # right-hand side (-m), zeros included
        bounds nonneg
        end
    """
    A = lp.constraint_matrix().tocoo()
    c = lp.cost_vector()
    lines = [f"pflp 1 {A.shape[1]} {A.shape[0]}", "minimize"]
    for j in np.nonzero(c)[0]:
        lines.append(f"{j} {fmt_float(c[j])}")
    order = np.lexsort((A.row, A.col))
    lines.append(f"equality {A.nnz}")
    for k in order:
        lines.append(f"{A.row[k]} {A.col[k]} {fmt_float(A.data[k])}")
    lines.append("rhs")
    for i, b in enumerate(-lp.mass):
        lines.append(f"{i} {fmt_float(b)}")
    lines.append("bounds nonneg")
    lines.append("end")
    atomic_write_text(path, "\n".join(lines) + "\n")
