"""Monte-Carlo closed-loop verification.

Trajectories apply the per-cell feedback outside the attractor region and a
local controller inside it, draw noise i.i.d. from the quantized law with
per-trajectory seeded generators, and terminate early when they leave the
domain. A trajectory counts as attracted when its final state lies in the
attractor region. Per-trajectory seeds derive deterministically from
(seed, cell, replicate), so reports are bit-reproducible.

The default local controller is a saturated discrete LQR built from a
finite-difference linearization of the noise-averaged map at the target: a
small neighborhood of a saddle point is not invariant under zero input, so
an actual local stabilizer is required for final-state attraction tests to
mean anything. ``inside_control='zero'`` restores plain zero input for
cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_are

from .errors import UsageError
from .models import NoiseModel, SystemModel
from .partition import OUTSIDE, Partition, cell_samples, locate_many
from .policy import NO_ACTION, Policy


@dataclass(frozen=True)
class Trajectory:
    """One simulated rollout: states has one more row than controls/noises."""

    states: np.ndarray
    controls: np.ndarray
    noises: np.ndarray
    escaped: bool

    def __len__(self) -> int:
        return int(self.controls.shape[0])


@dataclass(frozen=True)
class VerificationReport:
    fractions: np.ndarray     # attracted fraction per ordinary cell, in [0, 1]
    overall_pct: float        # mass-weighted percentage attracted
    inits_per_cell: int
    horizon: int
    seed: int
    n_escaped: int
    trajectories: tuple = ()


def zero_policy(partition: Partition) -> Policy:
    """Open-loop baseline: zero input on every ordinary cell."""
    idx = np.zeros(partition.n_restricted, dtype=np.int64)
    idx[partition.sink_index] = NO_ACTION
    return Policy(action_index=idx, control_values=np.array([0.0]))


def local_controller(system: SystemModel, noise: NoiseModel, partition: Partition,
                     target=None, u_max: float = np.inf):
    """Saturated LQR stand-in for the assumed local controller at the target.

    Linearizes the noise-averaged one-step map around ``(target, u=0)`` by
    central finite differences (wrapped coordinates measured relative to the
    target) and solves the discrete algebraic Riccati equation with unit
    state and input weights. Returns a callable ``states (n, d) -> u (n,)``,
    or ``None`` when the linearization is not stabilizable (callers fall
    back to zero input).
    """
    d = system.dimension
    if target is None:
        target = np.zeros(d)
    target = np.asarray(target, dtype=float)

    def mean_step(x, u):
        acc = np.zeros(d)
        for w, xi in zip(noise.probs, noise.values):
            acc += w * np.atleast_2d(system.step(x[None, :], u, xi))[0]
        return acc

    eps = 1e-6
    A = np.zeros((d, d))
    for k in range(d):
        dx = np.zeros(d)
        dx[k] = eps
        A[:, k] = (mean_step(target + dx, 0.0) - mean_step(target - dx, 0.0)) / (2 * eps)
    B = ((mean_step(target, eps) - mean_step(target, -eps)) / (2 * eps))[:, None]
    try:
        P = solve_discrete_are(A, B, np.eye(d), np.array([[1.0]]))
        K = np.linalg.solve(B.T @ P @ B + 1.0, B.T @ P @ A).ravel()
    except np.linalg.LinAlgError:
        return None
    closed = A - B @ K[None, :]
    if np.max(np.abs(np.linalg.eigvals(closed))) >= 1.0:
        return None

    span = partition.bounds[:, 1] - partition.bounds[:, 0]
    wrapped = partition.wrap.copy()

    def control(states: np.ndarray) -> np.ndarray:
        err = np.atleast_2d(states) - target
        for k in range(d):
            if wrapped[k]:
                err[:, k] = (err[:, k] + 0.5 * span[k]) % span[k] - 0.5 * span[k]
        return np.clip(-(err @ K), -u_max, u_max)

    return control


def _resolve_inside_control(inside_control, system, noise, partition, policy):
    """Turn the ``inside_control`` option into a callable (or None = zero)."""
    if callable(inside_control):
        return inside_control
    if inside_control == "zero":
        return None
    if inside_control == "lqr":
        u_max = float(np.max(np.abs(policy.control_values)))
        return local_controller(system, noise, partition, u_max=max(u_max, 1.0))
    raise UsageError(
        f"inside_control must be 'lqr', 'zero', or a callable, got {inside_control!r}"
    )


def uniform_noise_sampler(sigma: float):
    """Continuous uniform noise on [-sigma, sigma] (robustness runs)."""
    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-sigma, sigma, size=n)
    return draw


def trajectory_seed_sequence(seed: int, cell: int, replicate: int) -> np.random.SeedSequence:
    """Seed of the (cell, replicate) trajectory inside :func:`basin_fraction`."""
    return np.random.SeedSequence([int(seed) & (2**64 - 1), int(cell), int(replicate)])


def _controls_lookup(policy: Policy, partition: Partition) -> np.ndarray:
    """Control per full-space index; zero inside the attractor region."""
    table = np.zeros(partition.n_states)
    per_cell = policy.controls_per_cell()
    table[: partition.n_restricted] = np.where(np.isnan(per_cell), 0.0, per_cell)
    table[partition.attractor_index] = 0.0
    return table


def simulate_trajectory(system: SystemModel, policy: Policy, partition: Partition,
                        noise: NoiseModel, x0, horizon: int, seed: int = 0,
                        noise_sampler=None, inside_control="lqr") -> Trajectory:
    """Roll out the closed loop from ``x0`` for ``horizon`` steps.

    ``noise_sampler`` overrides the quantized law (for example with the
    continuous one); the full noise sequence is drawn up-front from the
    seeded generator, so early escape does not shift the stream.
    ``inside_control`` picks the controller applied inside the attractor
    region: the default saturated LQR, ``'zero'``, or a custom callable.
    """
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    if policy.n_restricted != partition.n_restricted:
        raise UsageError("policy and partition sizes do not match")
    if isinstance(seed, np.random.SeedSequence):
        rng = np.random.default_rng(seed)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1)]))
    draw = noise_sampler if noise_sampler is not None else noise.sampler()
    xis = np.asarray(draw(rng, horizon), dtype=float)
    table = _controls_lookup(policy, partition)
    c0 = _resolve_inside_control(inside_control, system, noise, partition, policy)

    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    controls, noises = [], []
    escaped = False
    for t in range(horizon):
        idx = int(locate_many(partition, x[None, :])[0])
        if idx == OUTSIDE:
            escaped = True
            break
        if idx == partition.attractor_index and c0 is not None:
            u = float(c0(x[None, :])[0])
        else:
            u = table[idx]
        x = np.asarray(system.step(x[None, :], u, xis[t])[0], dtype=float)
        states.append(x.copy())
        controls.append(u)
        noises.append(xis[t])
    return Trajectory(
        states=np.asarray(states), controls=np.asarray(controls),
        noises=np.asarray(noises), escaped=escaped,
    )


def basin_fraction(system: SystemModel, policy: Policy, partition: Partition,
                   noise: NoiseModel, inits_per_cell: int = 8, horizon: int = 100,
                   seed: int = 0, noise_sampler=None,
                   inside_control="lqr") -> VerificationReport:
    """Attracted fraction per cell and overall percentage.

    Launch points are stratified-random samples of each ordinary cell; the
    whole batch is stepped in lockstep (vectorized) with per-trajectory
    pre-drawn noise sequences, which reproduces :func:`simulate_trajectory`
    trajectory by trajectory.
    """
    if inits_per_cell < 1:
        raise UsageError("inits_per_cell must be >= 1")
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    n_ord = partition.n_ordinary
    n_traj = n_ord * inits_per_cell

    starts = np.concatenate([
        cell_samples(partition, c, inits_per_cell, "stratified-random", seed)
        for c in range(n_ord)
    ])
    draw = noise_sampler if noise_sampler is not None else noise.sampler()
    xis = np.empty((n_traj, horizon))
    k = 0
    for c in range(n_ord):
        for r in range(inits_per_cell):
            rng = np.random.default_rng(trajectory_seed_sequence(seed, c, r))
            xis[k] = draw(rng, horizon)
            k += 1

    table = _controls_lookup(policy, partition)
    c0 = _resolve_inside_control(inside_control, system, noise, partition, policy)
    states = starts.copy()
    active = np.ones(n_traj, dtype=bool)
    for t in range(horizon):
        idx = locate_many(partition, states)
        newly_out = active & (idx == OUTSIDE)
        active &= ~newly_out
        if not active.any():
            break
        act = np.nonzero(active)[0]
        u = table[idx[act]]
        if c0 is not None:
            in_att = idx[act] == partition.attractor_index
            if in_att.any():
                u[in_att] = c0(states[act][in_att])
        xi_t = xis[act, t]
        uniq = np.unique(xi_t)
        if uniq.size <= max(len(noise), 64):
            # group by noise value so the step map sees a scalar xi
            nxt = np.empty_like(states[act])
            for xi in uniq:
                sel = xi_t == xi
                nxt[sel] = system.step(states[act][sel], u[sel], xi)
        else:
            # continuous sampler: rely on the step map broadcasting xi
            nxt = np.atleast_2d(system.step(states[act], u, xi_t))
        states[act] = nxt

    final_idx = np.full(n_traj, OUTSIDE, dtype=np.int64)
    final_idx[active] = locate_many(partition, states[active])
    attracted = (final_idx == partition.attractor_index).reshape(n_ord, inits_per_cell)
    fractions = attracted.mean(axis=1)

    mass = np.full(n_ord, partition.cell_volume)
    overall_pct = 100.0 * float((fractions * mass).sum() / mass.sum())
    return VerificationReport(
        fractions=fractions, overall_pct=overall_pct,
        inits_per_cell=inits_per_cell, horizon=horizon, seed=seed,
        n_escaped=int(n_traj - active.sum()),
    )
