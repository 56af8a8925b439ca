"""Scikit-learn style estimator wrapping the synthesis pipeline.

``fit`` discretizes the system, solves the stabilization LP, extracts the
deterministic policy, and certifies the closed loop; ``predict`` maps state
points to feedback control values, so the fitted object drops into the
wider estimator ecosystem (``get_params``/``set_params``/``clone`` work as
usual).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .config import AUTO
from .errors import ConfigurationError
from .lp_core import assemble_lp, largest_feasible_gamma, solve_lp
from .models import ControlGrid, NoiseModel, StageCost, SystemModel, no_noise
from .partition import build_grid, default_attractor_region, locate_many
from .pf_builder import build_ensemble
from .policy import certify_policy, extract_policy
from .verify import basin_fraction, local_controller


class OptimalStabilizer(BaseEstimator):
    """Synthesize an optimally stabilizing per-cell feedback law.

    Parameters
    ----------
    system : SystemModel
        Controlled stochastic map to stabilize.
    cost : StageCost
        Nonnegative running cost, zero at the target.
    controls : array-like
        Ordered list of admissible control values.
    bounds : array-like (d, 2)
        State-space box.
    counts : tuple of int
        Grid resolution per dimension.
    wrap : tuple of bool
        Periodic flags per dimension.
    noise : NoiseModel, optional
        Quantized disturbance law (defaults to no noise).
    attractor_center, attractor_halfwidths : array-like, optional
        Target region; the half-widths default to one cell.
    gamma : float or "auto"
        Decay parameter; "auto" probes ``gamma_probe`` and keeps the
        largest feasible value.
    gamma_probe : tuple of float
        Ascending candidate list used when ``gamma="auto"``.
    samples_per_cell, scheme, seed, sink_penalty, threads
        Discretization controls; see the library documentation.

    Attributes
    ----------
    partition_, ensemble_, solution_, policy_, certificate_, measure_
        Synthesis artifacts available after :meth:`fit`.
    gamma_ : float
        The decay parameter actually used.
    value_ : ndarray
        Per-cell cost-to-go (LP dual vector).
    """

    def __init__(self, system=None, cost=None, controls=None,
                 bounds=((-np.pi, np.pi), (-10.0, 10.0)), counts=(40, 40),
                 wrap=(True, False), noise=None, attractor_center=None,
                 attractor_halfwidths=None, gamma=AUTO,
                 gamma_probe=(0.95, 0.98, 0.99, 1.0, 1.01, 1.02, 1.05),
                 samples_per_cell=10, scheme="uniform-subgrid", seed=0,
                 sink_penalty=1.0e6, local_control="lqr", threads=1):
        self.system = system
        self.cost = cost
        self.controls = controls
        self.bounds = bounds
        self.counts = counts
        self.wrap = wrap
        self.noise = noise
        self.attractor_center = attractor_center
        self.attractor_halfwidths = attractor_halfwidths
        self.gamma = gamma
        self.gamma_probe = gamma_probe
        self.samples_per_cell = samples_per_cell
        self.scheme = scheme
        self.seed = seed
        self.sink_penalty = sink_penalty
        self.local_control = local_control
        self.threads = threads

    def fit(self, X=None, y=None):
        """Run the synthesis pipeline. ``X`` and ``y`` are ignored and exist
        for interface compatibility."""
        if not isinstance(self.system, SystemModel):
            raise ConfigurationError("system must be a SystemModel instance")
        if not isinstance(self.cost, StageCost):
            raise ConfigurationError("cost must be a StageCost instance")
        if self.controls is None:
            raise ConfigurationError("controls must list the admissible control values")
        noise = self.noise if self.noise is not None else no_noise()
        if not isinstance(noise, NoiseModel):
            raise ConfigurationError("noise must be a NoiseModel instance")

        bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        region = default_attractor_region(
            bounds, self.counts, center=self.attractor_center,
            halfwidths=self.attractor_halfwidths,
        )
        self.partition_ = build_grid(bounds, self.counts, self.wrap, region)
        self.ensemble_ = build_ensemble(
            system=self.system, cost=self.cost, partition=self.partition_,
            controls=ControlGrid(np.asarray(self.controls, dtype=float)),
            noise=noise, samples_per_cell=self.samples_per_cell,
            scheme=self.scheme, seed=self.seed, sink_penalty=self.sink_penalty,
            threads=self.threads,
        )
        if self.gamma == AUTO:
            gamma = largest_feasible_gamma(self.ensemble_, self.gamma_probe)
            if gamma is None:
                raise ConfigurationError(
                    "no candidate gamma is feasible; widen gamma_probe or "
                    "inspect the leak diagnostic"
                )
        else:
            gamma = float(self.gamma)
        self.gamma_ = gamma
        self.solution_ = solve_lp(assemble_lp(self.ensemble_, gamma))
        if not self.solution_.optimal:
            raise ConfigurationError(
                f"stabilization LP is {self.solution_.status} at gamma={gamma}: "
                f"{self.solution_.diagnostic}"
            )
        self.policy_ = extract_policy(self.solution_, self.ensemble_)
        self.certificate_, self.measure_ = certify_policy(
            self.policy_, self.ensemble_, gamma)
        self.value_ = self.solution_.value
        self.n_cells_ = self.partition_.n_ordinary
        self.local_controller_ = None
        if self.local_control == "lqr":
            u_max = float(np.max(np.abs(self.policy_.control_values)))
            self.local_controller_ = local_controller(
                self.system, noise, self.partition_, u_max=max(u_max, 1.0))
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError(
                "This OptimalStabilizer instance is not fitted yet; call fit first."
            )

    def predict(self, X) -> np.ndarray:
        """Feedback control value for each state row of ``X``.

        Inside the attractor region the local controller takes over (zero
        input when ``local_control='zero'``); states outside the domain get
        NaN.
        """
        self._check_fitted()
        X = check_array(X, dtype=float, ensure_2d=True)
        if X.shape[1] != self.partition_.dim:
            raise ValueError(
                f"X has {X.shape[1]} features, partition dimension is {self.partition_.dim}"
            )
        idx = locate_many(self.partition_, X)
        per_cell = self.policy_.controls_per_cell()
        out = np.full(X.shape[0], np.nan)
        ordinary = (idx >= 0) & (idx < self.partition_.n_ordinary)
        out[ordinary] = per_cell[idx[ordinary]]
        in_att = idx == self.partition_.attractor_index
        if in_att.any():
            if self.local_controller_ is None:
                out[in_att] = 0.0
            else:
                out[in_att] = self.local_controller_(X[in_att])
        return out

    def score(self, X=None, y=None, inits_per_cell=2, horizon=100) -> float:
        """Fraction of initial conditions attracted to the target region
        under the fitted policy (a cheap Monte-Carlo basin estimate)."""
        self._check_fitted()
        noise = self.noise if self.noise is not None else no_noise()
        report = basin_fraction(
            system=self.system, policy=self.policy_, partition=self.partition_,
            noise=noise, inits_per_cell=inits_per_cell, horizon=horizon,
            seed=self.seed, inside_control=self.local_control,
        )
        return report.overall_pct / 100.0
