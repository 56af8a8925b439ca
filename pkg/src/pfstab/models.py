"""Controlled stochastic maps, quantized control/noise spaces, stage costs,
and the inverted-pendulum-on-cart benchmark.

All step and cost callables are vectorized: states are ``(n, d)`` arrays
(a single ``(d,)`` state is accepted and returned in kind), controls and
noise values broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ModelError, NumericError, UsageError

# Cart-pendulum constants: g = 9.8, l = 0.5, m = 2, M = 8, and derived
# m_r = m/(m+M), a = g/l, b = m_r/(m*l).
PENDULUM_MR = 0.2
PENDULUM_A = 19.6
PENDULUM_B = 0.2
_TWO_SQRT_A = 2.0 * np.sqrt(PENDULUM_A)

_INTEGRATORS = ("rk4", "euler")


@dataclass(frozen=True)
class ControlGrid:
    """Ordered finite set of control values.

    The order is load-bearing: deterministic policy extraction breaks ties
    by the smallest action index.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        if vals.size == 0:
            raise ConfigurationError("control grid must be nonempty")
        if np.unique(vals).size != vals.size:
            raise ConfigurationError("control values must be distinct")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @staticmethod
    def from_range(lo: float, hi: float, step: float) -> "ControlGrid":
        n = int(round((hi - lo) / step))
        return ControlGrid(lo + step * np.arange(n + 1))


@dataclass(frozen=True)
class NoiseModel:
    """Finitely supported i.i.d. noise law (values and probabilities)."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        probs = np.atleast_1d(np.asarray(self.probs, dtype=float))
        if vals.shape[0] != probs.shape[0] or vals.shape[0] < 1:
            raise ConfigurationError("noise values and probabilities must have equal length >= 1")
        if np.any(probs < 0):
            raise ConfigurationError("noise probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-15:
            raise ConfigurationError(
                f"noise probabilities must sum to 1 (got {probs.sum()!r})"
            )
        vals.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def sampler(self) -> Callable[[np.random.Generator, int], np.ndarray]:
        """Return a draw function ``(rng, n) -> n values`` for simulation."""
        values, probs = self.values, self.probs

        def draw(rng: np.random.Generator, n: int) -> np.ndarray:
            return rng.choice(values, size=n, p=probs)

        return draw


@dataclass(frozen=True)
class SystemModel:
    """A controlled stochastic map ``x_next = step(x, u, xi)``."""

    step: Callable[[np.ndarray, float, float], np.ndarray]
    dimension: int
    description: str = ""


@dataclass(frozen=True)
class StageCost:
    """Nonnegative running cost ``g(x, u, xi)``, zero at the target."""

    g: Callable[[np.ndarray, float, float], np.ndarray]
    description: str = ""


def quantize_uniform_noise(sigma: float, levels: int) -> NoiseModel:
    """Quantize the uniform law on ``[-sigma, sigma]`` to ``levels`` midpoints.

    Midpoints of equal subintervals keep the mean exactly zero; each value
    carries probability ``1/levels``.
    """
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    if levels < 1:
        raise ConfigurationError("levels must be >= 1")
    width = 2.0 * sigma / levels
    values = -sigma + (np.arange(levels) + 0.5) * width
    return NoiseModel(values=values, probs=np.full(levels, 1.0 / levels))


def bernoulli_noise(p: float) -> NoiseModel:
    """Bernoulli channel gate: value 1 with probability ``p``, else 0."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError("p must lie in [0, 1]")
    return NoiseModel(values=np.array([1.0, 0.0]), probs=np.array([p, 1.0 - p]))


def no_noise() -> NoiseModel:
    """Degenerate noise (single value 0 with probability 1)."""
    return NoiseModel(values=np.array([0.0]), probs=np.array([1.0]))


def pendulum_acceleration(x, v, u, zeta):
    """Angular acceleration of the pendulum-on-cart at angle ``x``, rate ``v``."""
    num = (
        PENDULUM_A * np.sin(x)
        - 0.5 * PENDULUM_MR * v * v * np.sin(2.0 * x)
        - PENDULUM_B * np.cos(x) * u
    )
    return num / (1.33 - PENDULUM_MR * np.cos(x) ** 2) - zeta * _TWO_SQRT_A * v


def pendulum_step(state, u, zeta, dt: float = 0.1, method: str = "rk4"):
    """Advance the pendulum one time step of size ``dt``.

    ``state`` is ``(x, xdot)`` or an ``(n, 2)`` batch. The classical
    4th-order one-step integrator is the default; ``method='euler'`` is a
    cross-check option. The angle is *not* wrapped here; wrapping belongs
    to the caller's partition.
    """
    if dt <= 0:
        raise UsageError("dt must be positive")
    if method not in _INTEGRATORS:
        raise UsageError(f"unknown integrator {method!r}; expected one of {_INTEGRATORS}")
    arr = np.asarray(state, dtype=float)
    single = arr.ndim == 1
    s = np.atleast_2d(arr)
    if s.shape[1] != 2:
        raise UsageError("pendulum state must have two components (x, xdot)")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u)) and np.all(np.isfinite(zeta))):
        raise NumericError("pendulum_step received non-finite input")

    x, v = s[:, 0], s[:, 1]
    if method == "euler":
        a0 = pendulum_acceleration(x, v, u, zeta)
        nxt = np.stack([x + dt * v, v + dt * a0], axis=1)
    else:
        k1x, k1v = v, pendulum_acceleration(x, v, u, zeta)
        k2x = v + 0.5 * dt * k1v
        k2v = pendulum_acceleration(x + 0.5 * dt * k1x, k2x, u, zeta)
        k3x = v + 0.5 * dt * k2v
        k3v = pendulum_acceleration(x + 0.5 * dt * k2x, k3x, u, zeta)
        k4x = v + dt * k3v
        k4v = pendulum_acceleration(x + dt * k3x, k4x, u, zeta)
        nxt = np.stack(
            [
                x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
                v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
            ],
            axis=1,
        )
    return nxt[0] if single else nxt


def pendulum_model(dt: float = 0.1, zeta: float = 0.0, noise_channel: str = "damping",
                   method: str = "rk4", velocity_limit: float | None = 10.0) -> SystemModel:
    """Pendulum benchmark with the noise wired into one of two channels.

    ``noise_channel='damping'`` substitutes the sampled value for the damping
    coefficient each step (mean-zero damping perturbation). ``'control'``
    multiplies the commanded input by the sampled value (Bernoulli erasure).
    ``'none'`` ignores the noise argument.

    ``velocity_limit`` saturates the angular rate at the state-space bound,
    making the benchmark's map send the box into itself (the angle wraps via
    the partition). Pass ``None`` for the raw integrator, whose images can
    leave the velocity range near the horizontal at high rates; transition
    building then routes that mass to the sink.
    """
    if noise_channel == "damping":
        def raw(state, u, xi):
            return pendulum_step(state, u, xi, dt=dt, method=method)
        desc = f"pendulum-on-cart, dt={dt}, random damping"
    elif noise_channel == "control":
        def raw(state, u, xi):
            return pendulum_step(state, np.asarray(xi) * u, zeta, dt=dt, method=method)
        desc = f"pendulum-on-cart, dt={dt}, zeta={zeta}, control-channel gate"
    elif noise_channel == "none":
        def raw(state, u, xi):
            return pendulum_step(state, u, zeta, dt=dt, method=method)
        desc = f"pendulum-on-cart, dt={dt}, zeta={zeta}"
    else:
        raise ConfigurationError(
            f"unknown noise channel {noise_channel!r}; expected damping|control|none"
        )
    if velocity_limit is None:
        step = raw
    else:
        limit = float(velocity_limit)
        if limit <= 0:
            raise ConfigurationError("velocity_limit must be positive")

        def step(state, u, xi):
            nxt = np.atleast_2d(raw(state, u, xi))
            np.clip(nxt[:, 1], -limit, limit, out=nxt[:, 1])
            return nxt[0] if np.asarray(state).ndim == 1 else nxt

        desc += f", rate saturated at +-{limit}"
    return SystemModel(step=step, dimension=2, description=desc)


def quadratic_cost(state, u):
    """``x^2 + xdot^2 + u^2`` for the pendulum benchmark (noise independent)."""
    s = np.atleast_2d(np.asarray(state, dtype=float))
    val = s[:, 0] ** 2 + s[:, 1] ** 2 + np.square(u)
    return float(val[0]) if np.asarray(state).ndim == 1 else val


def quadratic_stage_cost() -> StageCost:
    def g(state, u, xi):
        return quadratic_cost(state, u)
    return StageCost(g=g, description="x^2 + xdot^2 + u^2")


def check_equilibrium(system: SystemModel, noise: NoiseModel, target=None,
                      u: float = 0.0, atol: float = 0.0) -> None:
    """Raise :class:`ModelError` unless the target is a fixed point for every
    quantized noise value."""
    if target is None:
        target = np.zeros(system.dimension)
    target = np.asarray(target, dtype=float)
    for xi in noise.values:
        nxt = system.step(target[None, :], u, xi)[0]
        if np.max(np.abs(nxt - target)) > atol:
            raise ModelError(
                f"target {target.tolist()} is not equilibrium under noise value {xi}"
            )
