"""Run configuration: a flat ``key = value`` text format.

Grammar: one ``key = value`` pair per line; blank lines and ``#`` comments
(whole-line or trailing) are ignored; list values are comma separated;
booleans are ``true``/``false``; the control list also accepts the range
form ``lo:hi:step`` (inclusive). Unknown keys are rejected. The exact key
set is documented in the README and mirrored by :data:`CONFIG_KEYS`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from ._io import fmt_float, fnv1a64
from .errors import ConfigurationError
from .models import (
    ControlGrid,
    NoiseModel,
    SystemModel,
    StageCost,
    bernoulli_noise,
    no_noise,
    pendulum_model,
    quadratic_stage_cost,
    quantize_uniform_noise,
)
from .partition import Partition, build_grid, default_attractor_region

AUTO = "auto"


@dataclass(frozen=True)
class RunConfig:
    """Validated description of a full pipeline run."""

    model: str = "pendulum"
    dt: float = 0.1
    zeta: float = 0.0
    integrator: str = "rk4"
    noise: str = "uniform"              # uniform | bernoulli | none
    sigma: float = 0.1
    noise_levels: int = 10
    bernoulli_p: float = 0.85
    cost: str = "quadratic"
    bounds: tuple = (-math.pi, math.pi, -10.0, 10.0)
    counts: tuple = (70, 70)
    wrap: tuple = (True, False)
    attractor_center: tuple = (0.0, 0.0)
    attractor_halfwidths: tuple | str = AUTO
    controls: tuple = tuple(float(u) for u in range(-80, 81, 10))
    gamma: float | str = 1.01
    gamma_probe: tuple = (0.95, 0.98, 0.99, 1.0, 1.01, 1.02, 1.05)
    samples_per_cell: int = 10
    scheme: str = "uniform-subgrid"
    sink_penalty: float = 1.0e6
    seed: int = 0
    verify_inits: int = 8
    verify_horizon: int = 100
    verify_continuous_noise: bool = False
    saturate_velocity: bool = True
    local_control: str = "lqr"
    trajectory_start: tuple = (math.pi / 2, 0.0)
    heatmaps: bool = False
    export_lp: bool = False
    threads: int = 1
    out: str = "runs/out"

    def validate(self) -> "RunConfig":
        if self.model != "pendulum":
            raise ConfigurationError(
                f"unknown model {self.model!r}; custom systems plug in through the library API"
            )
        if self.cost != "quadratic":
            raise ConfigurationError(f"unknown cost {self.cost!r}")
        if self.noise not in ("uniform", "bernoulli", "none"):
            raise ConfigurationError(f"unknown noise kind {self.noise!r}")
        if self.integrator not in ("rk4", "euler"):
            raise ConfigurationError(f"unknown integrator {self.integrator!r}")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if len(self.bounds) != 2 * len(self.counts):
            raise ConfigurationError("bounds needs two values per dimension")
        if len(self.wrap) != len(self.counts):
            raise ConfigurationError("wrap needs one flag per dimension")
        if any(c < 2 for c in self.counts):
            raise ConfigurationError("need at least 2 cells per dimension")
        if self.gamma != AUTO and (not np.isfinite(self.gamma) or self.gamma <= 0):
            raise ConfigurationError("gamma must be positive (or 'auto')")
        if list(self.gamma_probe) != sorted(self.gamma_probe):
            raise ConfigurationError("gamma_probe must be sorted ascending")
        if self.samples_per_cell < 1:
            raise ConfigurationError("samples_per_cell must be >= 1")
        if self.scheme not in ("uniform-subgrid", "stratified-random"):
            raise ConfigurationError(f"unknown sampling scheme {self.scheme!r}")
        if self.noise == "uniform" and self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        if self.noise == "uniform" and self.noise_levels < 1:
            raise ConfigurationError("noise_levels must be >= 1")
        if self.noise == "bernoulli" and not 0 <= self.bernoulli_p <= 1:
            raise ConfigurationError("bernoulli_p must lie in [0, 1]")
        if self.verify_inits < 1 or self.verify_horizon < 1:
            raise ConfigurationError("verify_inits and verify_horizon must be >= 1")
        if self.local_control not in ("lqr", "zero"):
            raise ConfigurationError(f"unknown local_control {self.local_control!r}")
        if self.seed < 0:
            raise ConfigurationError("seed must be a nonnegative integer")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if len(self.controls) < 1:
            raise ConfigurationError("need at least one control value")
        if len(self.trajectory_start) != len(self.counts):
            raise ConfigurationError("trajectory_start must match the state dimension")
        # constructing the objects exercises their own validation
        _ = ControlGrid(np.asarray(self.controls))
        return self


CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))

_TUPLE_FLOAT = {"bounds", "attractor_center", "gamma_probe", "trajectory_start"}
_TUPLE_INT = {"counts"}
_TUPLE_BOOL = {"wrap"}
_BOOL = {"verify_continuous_noise", "heatmaps", "export_lp", "saturate_velocity"}
_INT = {"noise_levels", "samples_per_cell", "seed", "verify_inits", "verify_horizon", "threads"}
_FLOAT = {"dt", "zeta", "sigma", "bernoulli_p", "sink_penalty"}
_STR = {"model", "integrator", "noise", "cost", "scheme", "local_control", "out"}


def _parse_bool(tok: str, key: str) -> bool:
    low = tok.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"{key}: expected true/false, got {tok!r}")


def _parse_controls(raw: str) -> tuple:
    raw = raw.strip()
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"controls range must be lo:hi:step, got {raw!r}")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ConfigurationError("controls range needs step > 0 and hi >= lo")
        n = int(round((hi - lo) / step))
        return tuple(lo + step * k for k in range(n + 1))
    return tuple(float(tok) for tok in raw.split(","))


def parse_config(text: str) -> RunConfig:
    """Parse configuration text into a validated :class:`RunConfig`."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key == "controls":
                values[key] = _parse_controls(val)
            elif key == "gamma":
                values[key] = AUTO if val == AUTO else float(val)
            elif key == "attractor_halfwidths":
                values[key] = AUTO if val == AUTO else tuple(float(t) for t in val.split(","))
            elif key in _TUPLE_FLOAT:
                values[key] = tuple(float(t) for t in val.split(","))
            elif key in _TUPLE_INT:
                values[key] = tuple(int(t) for t in val.split(","))
            elif key in _TUPLE_BOOL:
                values[key] = tuple(_parse_bool(t.strip(), key) for t in val.split(","))
            elif key in _BOOL:
                values[key] = _parse_bool(val, key)
            elif key in _INT:
                values[key] = int(val)
            elif key in _FLOAT:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: cannot parse {key}: {exc}") from exc
    return RunConfig(**values).validate()


def load_config(path: str) -> RunConfig:
    with open(path, "r") as fh:
        return parse_config(fh.read())


def serialize_config(config: RunConfig) -> str:
    """Deterministic text form; ``parse_config`` round-trips it exactly."""
    def render(key, value):
        if key == "controls" or key in _TUPLE_FLOAT:
            return ",".join(fmt_float(v) for v in value)
        if key == "attractor_halfwidths":
            return value if value == AUTO else ",".join(fmt_float(v) for v in value)
        if key == "gamma":
            return value if value == AUTO else fmt_float(value)
        if key in _TUPLE_INT:
            return ",".join(str(v) for v in value)
        if key in _TUPLE_BOOL:
            return ",".join("true" if v else "false" for v in value)
        if key in _BOOL:
            return "true" if value else "false"
        if key in _FLOAT:
            return fmt_float(value)
        return str(value)

    lines = [f"{f.name} = {render(f.name, getattr(config, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return f"{fnv1a64(serialize_config(config).encode('ascii')):016x}"


# ---------------------------------------------------------------------------
# object factories

def partition_from_config(config: RunConfig) -> Partition:
    d = len(config.counts)
    bounds = np.asarray(config.bounds, dtype=float).reshape(d, 2)
    halfwidths = None if config.attractor_halfwidths == AUTO else np.asarray(
        config.attractor_halfwidths, dtype=float)
    region = default_attractor_region(bounds, config.counts,
                                      center=np.asarray(config.attractor_center),
                                      halfwidths=halfwidths)
    return build_grid(bounds, config.counts, config.wrap, region)


def model_from_config(config: RunConfig) -> SystemModel:
    channel = {"uniform": "damping", "bernoulli": "control", "none": "none"}[config.noise]
    if config.saturate_velocity:
        limit = max(abs(config.bounds[2]), abs(config.bounds[3]))
    else:
        limit = None
    return pendulum_model(dt=config.dt, zeta=config.zeta, noise_channel=channel,
                          method=config.integrator, velocity_limit=limit)


def noise_from_config(config: RunConfig) -> NoiseModel:
    if config.noise == "uniform":
        return quantize_uniform_noise(config.sigma, config.noise_levels)
    if config.noise == "bernoulli":
        return bernoulli_noise(config.bernoulli_p)
    return no_noise()


def cost_from_config(config: RunConfig) -> StageCost:
    return quadratic_stage_cost()
