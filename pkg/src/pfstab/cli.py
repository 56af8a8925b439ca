"""Pipeline orchestration and the ``pfstab`` command-line interface.

Stages (each independently invocable, resuming from persisted artifacts)::

    build    -> ensemble.pfens (+ ensemble_matrices/*.pfmat)
    solve    -> solution.pfsol [+ lp.pflp]
    extract  -> policy.csv
    certify  -> certificate.txt, measure.csv
    verify   -> attraction.csv, verify_summary.txt
    report   -> value.csv, control.csv, trajectory_*.csv, summary.txt [+ .pgm]
    all      -> everything above in order

Every artifact carries the grid hash of the configuration that produced it;
stages refuse inputs from a different grid or seed. A failed stage leaves a
machine-readable ``<stage>.error.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text, fmt_float, fnv1a64
from .config import (
    AUTO,
    RunConfig,
    cost_from_config,
    load_config,
    model_from_config,
    noise_from_config,
    partition_from_config,
    serialize_config,
)
from .errors import (
    ConfigurationError,
    CorruptFileError,
    MissingArtifactError,
    PfstabError,
    StaleArtifactError,
    UsageError,
)
from .lp_core import LPSolution, assemble_lp, export_lp, largest_feasible_gamma, solve_lp
from .models import ControlGrid
from .partition import Partition, ordinary_centers, ordinary_multi_index
from .pf_builder import TransferEnsemble, build_ensemble, load_ensemble, save_ensemble
from .policy import NO_ACTION, Policy, certify_policy, extract_policy
from .verify import (
    VerificationReport,
    basin_fraction,
    simulate_trajectory,
    uniform_noise_sampler,
    zero_policy,
)

STAGES = ("build", "solve", "extract", "certify", "verify", "report")


# ---------------------------------------------------------------------------
# artifact paths

def _paths(out: str) -> dict:
    return {
        "ensemble": os.path.join(out, "ensemble.pfens"),
        "solution": os.path.join(out, "solution.pfsol"),
        "lp": os.path.join(out, "lp.pflp"),
        "policy": os.path.join(out, "policy.csv"),
        "certificate": os.path.join(out, "certificate.txt"),
        "measure": os.path.join(out, "measure.csv"),
        "value": os.path.join(out, "value.csv"),
        "control": os.path.join(out, "control.csv"),
        "attraction": os.path.join(out, "attraction.csv"),
        "verify_summary": os.path.join(out, "verify_summary.txt"),
        "trajectory_closed": os.path.join(out, "trajectory_closed.csv"),
        "trajectory_open": os.path.join(out, "trajectory_open.csv"),
        "summary": os.path.join(out, "summary.txt"),
        "config": os.path.join(out, "config.txt"),
    }


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"stage '{stage}' needs {path}; run the earlier stages first"
        )
    return path


# ---------------------------------------------------------------------------
# exports

def export_grid_csv(vector, partition: Partition, path: str,
                    sink_value: float = 0.0, attractor_value: float = 0.0) -> None:
    """Write a per-cell vector as a grid CSV (2-D partitions).

    Header ``grid_i,grid_j,x_center,y_center,value``; rows are ordinary cells
    in row-major order, then the sink and attractor rows with sentinel grid
    indices -1 and NaN centers.
    """
    if partition.dim != 2:
        raise UsageError("grid CSV export is defined for 2-D partitions")
    vec = np.asarray(vector, dtype=float)
    if vec.shape != (partition.n_ordinary,):
        raise UsageError(
            f"vector has length {vec.shape}, expected ({partition.n_ordinary},)"
        )
    coords = ordinary_multi_index(partition)
    centers = ordinary_centers(partition)
    lines = ["grid_i,grid_j,x_center,y_center,value"]
    for k in range(partition.n_ordinary):
        lines.append(
            f"{coords[k, 0]},{coords[k, 1]},{fmt_float(centers[k, 0])},"
            f"{fmt_float(centers[k, 1])},{fmt_float(vec[k])}"
        )
    lines.append(f"-1,-1,nan,nan,{fmt_float(sink_value)}")
    lines.append(f"-1,-1,nan,nan,{fmt_float(attractor_value)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_grid_csv(path: str) -> np.ndarray:
    """Ordinary-cell values back from a grid CSV (sentinel rows dropped)."""
    vals = []
    with open(path, "r") as fh:
        header = fh.readline()
        if not header.startswith("grid_i"):
            raise CorruptFileError(f"{path}: unexpected header {header!r}")
        for line in fh:
            toks = line.strip().split(",")
            if toks[0] == "-1":
                continue
            vals.append(float(toks[4]))
    return np.asarray(vals)


def export_policy_csv(policy: Policy, partition: Partition, path: str) -> None:
    """Policy table export: ``cell_index,grid_i,grid_j,action_index,control_value``."""
    if partition.dim != 2:
        raise UsageError("policy CSV export is defined for 2-D partitions")
    coords = ordinary_multi_index(partition)
    lines = ["cell_index,grid_i,grid_j,action_index,control_value"]
    for j in range(partition.n_ordinary):
        a = int(policy.action_index[j])
        u = policy.control_values[a]
        lines.append(f"{j},{coords[j, 0]},{coords[j, 1]},{a},{fmt_float(u)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_policy_csv(path: str, partition: Partition, control_values) -> Policy:
    controls = np.asarray(control_values, dtype=float)
    action = np.full(partition.n_restricted, NO_ACTION, dtype=np.int64)
    with open(path, "r") as fh:
        header = fh.readline()
        if not header.startswith("cell_index"):
            raise CorruptFileError(f"{path}: unexpected header {header!r}")
        for line in fh:
            toks = line.strip().split(",")
            cell, a, u = int(toks[0]), int(toks[3]), float(toks[4])
            if not 0 <= cell < partition.n_ordinary:
                raise CorruptFileError(f"{path}: cell index {cell} out of range")
            if not 0 <= a < controls.shape[0] or controls[a] != u:
                raise StaleArtifactError(
                    f"{path}: action {a} / control {u!r} does not match the configuration"
                )
            action[cell] = a
    if np.any(action[: partition.n_ordinary] == NO_ACTION):
        raise CorruptFileError(f"{path}: policy is not total on ordinary cells")
    return Policy(action_index=action, control_values=controls)


def export_trajectory_csv(trajectory, path: str) -> None:
    """``step,x,xdot,u,xi`` rows; the final state row carries NaN for u, xi."""
    lines = ["step,x,xdot,u,xi"]
    T = len(trajectory)
    for t in range(T):
        x = trajectory.states[t]
        lines.append(
            f"{t},{fmt_float(x[0])},{fmt_float(x[1])},"
            f"{fmt_float(trajectory.controls[t])},{fmt_float(trajectory.noises[t])}"
        )
    x = trajectory.states[T]
    lines.append(f"{T},{fmt_float(x[0])},{fmt_float(x[1])},nan,nan")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_pgm(vector, partition: Partition, path: str) -> None:
    """Greyscale heatmap (binary PGM) of an ordinary-cell vector."""
    if partition.dim != 2:
        raise UsageError("heatmaps are defined for 2-D partitions")
    grid = np.zeros((partition.counts[0], partition.counts[1]))
    coords = ordinary_multi_index(partition)
    vec = np.asarray(vector, dtype=float)
    grid[coords[:, 0], coords[:, 1]] = vec
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        img = np.round(255.0 * (grid - lo) / (hi - lo)).astype(np.uint8)
    else:
        img = np.full(grid.shape, 128, dtype=np.uint8)
    # image rows scan the second state coordinate top-down
    img = img.T[::-1]
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + img.tobytes())


# ---------------------------------------------------------------------------
# solution persistence

def save_solution(solution: LPSolution, grid_hash: str, seed: int, path: str) -> None:
    lines = ["pfsolution 1"]
    lines.append(f"grid_hash {grid_hash}")
    lines.append(f"seed {seed}")
    lines.append(f"gamma {fmt_float(solution.gamma)}")
    lines.append(f"status {solution.status}")
    if solution.optimal:
        lines.append(f"primal_obj {fmt_float(solution.primal_obj)}")
        lines.append(f"dual_obj {fmt_float(solution.dual_obj)}")
        lines.append(f"residual {fmt_float(solution.residual)}")
        lines.append(f"duality_gap {fmt_float(solution.duality_gap)}")
        n = solution.value.shape[0]
        lines.append(f"n_restricted {n}")
        lines.append(f"actions {len(solution.theta)}")
        for a, th in enumerate(solution.theta):
            nz = np.nonzero(th)[0]
            lines.append(f"theta {a} {nz.size}")
            for j in nz:
                lines.append(f"{j} {fmt_float(th[j])}")
        lines.append("value")
        lines.extend(fmt_float(v) for v in solution.value)
    else:
        lines.append(f"diagnostic {solution.diagnostic}")
    body = "\n".join(lines) + "\n"
    atomic_write_text(path, body + f"checksum {fnv1a64(body.encode('ascii')):016x}\n")


def load_solution(path: str) -> tuple[LPSolution, str, int]:
    with open(path, "r") as fh:
        text = fh.read()
    idx = text.rfind("checksum ")
    if idx < 0:
        raise CorruptFileError(f"{path}: missing checksum line")
    body, tail = text[:idx], text[idx:]
    stated = tail.split()
    if len(stated) != 2 or f"{fnv1a64(body.encode('ascii')):016x}" != stated[1]:
        raise CorruptFileError(f"{path}: checksum mismatch")
    lines = body.splitlines()
    if not lines or lines[0] != "pfsolution 1":
        raise CorruptFileError(f"{path}: bad solution header")
    meta: dict = {}
    theta_blocks: dict[int, dict[int, float]] = {}
    value: list[float] = []
    mode, current = None, None
    for line in lines[1:]:
        toks = line.split()
        if toks[0] == "theta":
            current = {}
            theta_blocks[int(toks[1])] = current
            mode = "theta"
        elif toks[0] == "value":
            mode = "value"
        elif mode == "theta" and len(toks) == 2 and toks[0].isdigit():
            current[int(toks[0])] = float(toks[1])
        elif mode == "value" and len(toks) == 1:
            value.append(float(toks[0]))
        elif toks[0] == "diagnostic":
            meta["diagnostic"] = line.partition(" ")[2]
            mode = None
        else:
            meta[toks[0]] = toks[1]
            mode = None
    status = meta["status"]
    gamma = float(meta["gamma"])
    if status != "optimal":
        sol = LPSolution(status=status, gamma=gamma, diagnostic=meta.get("diagnostic", ""))
        return sol, meta["grid_hash"], int(meta["seed"])
    n = int(meta["n_restricted"])
    n_act = int(meta["actions"])
    theta = []
    for a in range(n_act):
        th = np.zeros(n)
        for j, v in theta_blocks.get(a, {}).items():
            th[j] = v
        theta.append(th)
    sol = LPSolution(
        status="optimal", gamma=gamma, theta=tuple(theta),
        value=np.asarray(value, dtype=float),
        primal_obj=float(meta["primal_obj"]), dual_obj=float(meta["dual_obj"]),
        residual=float(meta["residual"]), duality_gap=float(meta["duality_gap"]),
    )
    return sol, meta["grid_hash"], int(meta["seed"])


# ---------------------------------------------------------------------------
# stages

def _check_fresh(expected_hash: str, found_hash: str, expected_seed: int,
                 found_seed: int, artifact: str) -> None:
    if found_hash != expected_hash:
        raise StaleArtifactError(
            f"{artifact} was built for grid {found_hash}, configuration has {expected_hash}"
        )
    if found_seed != expected_seed:
        raise StaleArtifactError(
            f"{artifact} was built with seed {found_seed}, configuration has {expected_seed}"
        )


def _load_ensemble_checked(config: RunConfig, paths: dict, stage: str) -> tuple[TransferEnsemble, Partition]:
    partition = partition_from_config(config)
    ensemble = load_ensemble(_require(paths["ensemble"], stage))
    _check_fresh(partition.grid_hash(), ensemble.grid_hash, config.seed,
                 ensemble.seed, paths["ensemble"])
    return ensemble, partition


def stage_build(config: RunConfig, out: str) -> None:
    paths = _paths(out)
    partition = partition_from_config(config)
    ensemble = build_ensemble(
        system=model_from_config(config),
        cost=cost_from_config(config),
        partition=partition,
        controls=ControlGrid(np.asarray(config.controls)),
        noise=noise_from_config(config),
        samples_per_cell=config.samples_per_cell,
        scheme=config.scheme,
        seed=config.seed,
        sink_penalty=config.sink_penalty,
        threads=config.threads,
    )
    save_ensemble(ensemble, paths["ensemble"])
    atomic_write_text(paths["config"], serialize_config(config))


def stage_solve(config: RunConfig, out: str) -> LPSolution:
    paths = _paths(out)
    ensemble, _ = _load_ensemble_checked(config, paths, "solve")
    if config.gamma == AUTO:
        gamma = largest_feasible_gamma(ensemble, config.gamma_probe)
        if gamma is None:
            raise ConfigurationError(
                "no gamma in gamma_probe is feasible; the leak diagnostic in the "
                "solution file lists cells escaping under every action"
            )
    else:
        gamma = float(config.gamma)
    lp = assemble_lp(ensemble, gamma)
    if config.export_lp:
        export_lp(lp, paths["lp"])
    solution = solve_lp(lp)
    save_solution(solution, ensemble.grid_hash, config.seed, paths["solution"])
    if not solution.optimal:
        raise PfstabError(
            f"LP at gamma={gamma} is {solution.status}: {solution.diagnostic}; "
            "consider gamma = auto to probe the feasible range"
        )
    return solution


def stage_extract(config: RunConfig, out: str) -> Policy:
    paths = _paths(out)
    ensemble, partition = _load_ensemble_checked(config, paths, "extract")
    solution, ghash, seed = load_solution(_require(paths["solution"], "extract"))
    _check_fresh(ensemble.grid_hash, ghash, config.seed, seed, paths["solution"])
    if not solution.optimal:
        raise PfstabError(f"cannot extract a policy from a {solution.status} solution")
    policy = extract_policy(solution, ensemble)
    export_policy_csv(policy, partition, paths["policy"])
    return policy


def stage_certify(config: RunConfig, out: str) -> tuple:
    paths = _paths(out)
    ensemble, partition = _load_ensemble_checked(config, paths, "certify")
    solution, ghash, seed = load_solution(_require(paths["solution"], "certify"))
    _check_fresh(ensemble.grid_hash, ghash, config.seed, seed, paths["solution"])
    policy = read_policy_csv(_require(paths["policy"], "certify"), partition,
                             ensemble.controls.values)
    cert, measure = certify_policy(policy, ensemble, solution.gamma)
    lines = ["pfcertificate 1"]
    lines.append(f"grid_hash {ensemble.grid_hash}")
    lines.append(f"gamma {fmt_float(cert.gamma)}")
    lines.append(f"verdict {cert.verdict}")
    lines.append(f"spectral_radius {fmt_float(cert.spectral_radius)}")
    lines.append(f"decay_bound {fmt_float(cert.decay_bound)}")
    if measure is not None:
        lines.append(f"measure_residual {fmt_float(measure.residual)}")
    if cert.diagnostic:
        lines.append("non_decaying_cells " + " ".join(str(i) for i in cert.diagnostic))
    atomic_write_text(paths["certificate"], "\n".join(lines) + "\n")
    if measure is not None:
        mu = measure.mu
        sink = ensemble.sink_index
        export_grid_csv(mu[: partition.n_ordinary], partition, paths["measure"],
                        sink_value=float(mu[sink]) if sink is not None else 0.0)
    return cert, measure


def stage_verify(config: RunConfig, out: str) -> VerificationReport:
    paths = _paths(out)
    ensemble, partition = _load_ensemble_checked(config, paths, "verify")
    policy = read_policy_csv(_require(paths["policy"], "verify"), partition,
                             ensemble.controls.values)
    sampler = None
    if config.verify_continuous_noise and config.noise == "uniform":
        sampler = uniform_noise_sampler(config.sigma)
    report = basin_fraction(
        system=model_from_config(config), policy=policy, partition=partition,
        noise=noise_from_config(config), inits_per_cell=config.verify_inits,
        horizon=config.verify_horizon, seed=config.seed, noise_sampler=sampler,
        inside_control=config.local_control,
    )
    export_grid_csv(report.fractions, partition, paths["attraction"])
    lines = [
        "pfverify 1",
        f"grid_hash {ensemble.grid_hash}",
        f"seed {config.seed}",
        f"inits_per_cell {report.inits_per_cell}",
        f"horizon {report.horizon}",
        f"overall_attraction_pct {fmt_float(report.overall_pct)}",
        f"escaped_trajectories {report.n_escaped}",
    ]
    atomic_write_text(paths["verify_summary"], "\n".join(lines) + "\n")
    return report


def stage_report(config: RunConfig, out: str) -> None:
    paths = _paths(out)
    ensemble, partition = _load_ensemble_checked(config, paths, "report")
    solution, ghash, seed = load_solution(_require(paths["solution"], "report"))
    _check_fresh(ensemble.grid_hash, ghash, config.seed, seed, paths["solution"])
    policy = read_policy_csv(_require(paths["policy"], "report"), partition,
                             ensemble.controls.values)

    n_ord = partition.n_ordinary
    sink = ensemble.sink_index
    # value grid (cost-to-go, dual vector)
    export_grid_csv(solution.value[:n_ord], partition, paths["value"],
                    sink_value=float(solution.value[sink]))
    # control grid
    controls = policy.controls_per_cell()
    export_grid_csv(controls[:n_ord], partition, paths["control"])
    # sample closed- vs open-loop trajectories
    system = model_from_config(config)
    noise = noise_from_config(config)
    x0 = np.asarray(config.trajectory_start, dtype=float)
    closed = simulate_trajectory(system, policy, partition, noise, x0,
                                 config.verify_horizon, seed=config.seed,
                                 inside_control=config.local_control)
    opened = simulate_trajectory(system, zero_policy(partition), partition, noise,
                                 x0, config.verify_horizon, seed=config.seed,
                                 inside_control="zero")
    export_trajectory_csv(closed, paths["trajectory_closed"])
    export_trajectory_csv(opened, paths["trajectory_open"])

    if config.heatmaps:
        for name in ("measure", "value", "control", "attraction"):
            csv_path = paths[name]
            if os.path.exists(csv_path):
                write_pgm(read_grid_csv(csv_path), partition,
                          csv_path.replace(".csv", ".pgm"))

    summary = ["pfsummary 1", f"grid_hash {ensemble.grid_hash}",
               f"gamma {fmt_float(solution.gamma)}",
               f"lp_status {solution.status}",
               f"primal_obj {fmt_float(solution.primal_obj)}",
               f"duality_gap {fmt_float(solution.duality_gap)}"]
    cert_path = paths["certificate"]
    if os.path.exists(cert_path):
        with open(cert_path) as fh:
            for line in fh:
                if line.startswith(("verdict", "spectral_radius", "decay_bound")):
                    summary.append(line.strip())
    vs_path = paths["verify_summary"]
    if os.path.exists(vs_path):
        with open(vs_path) as fh:
            for line in fh:
                if line.startswith(("overall_attraction_pct", "escaped_trajectories")):
                    summary.append(line.strip())
    atomic_write_text(paths["summary"], "\n".join(summary) + "\n")


_STAGE_FN = {
    "build": stage_build,
    "solve": stage_solve,
    "extract": stage_extract,
    "certify": stage_certify,
    "verify": stage_verify,
    "report": stage_report,
}


def run_pipeline(config: RunConfig, out: str | None = None, stages=STAGES) -> None:
    """Run pipeline stages in order, failing atomically per stage."""
    out = out or config.out
    os.makedirs(out, exist_ok=True)
    for stage in stages:
        try:
            _STAGE_FN[stage](config, out)
        except BaseException as exc:
            payload = {
                "stage": stage,
                "error_type": type(exc).__name__,
                "message": str(exc),
            }
            atomic_write_text(os.path.join(out, f"{stage}.error.json"),
                              json.dumps(payload, indent=2) + "\n")
            raise
        else:
            err = os.path.join(out, f"{stage}.error.json")
            if os.path.exists(err):
                os.unlink(err)


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfstab",
        description="Optimal a.e. stabilization via transfer operators and linear programming",
    )
    parser.add_argument("stage", choices=STAGES + ("all",))
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--out", default=None, help="output directory (default: config 'out')")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--gamma", type=float, default=None, help="override the config gamma")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for matrix construction (PFSTAB_THREADS caps this)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.gamma is not None:
            overrides["gamma"] = args.gamma
        if args.threads is not None:
            overrides["threads"] = args.threads
        if overrides:
            config = dataclasses.replace(config, **overrides).validate()
        stages = STAGES if args.stage == "all" else (args.stage,)
        run_pipeline(config, args.out, stages)
    except PfstabError as exc:
        print(f"pfstab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
