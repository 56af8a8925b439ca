"""Sparse transfer-matrix construction by cell sampling.

For each (action, noise value) pair the sample points of every ordinary
cell are pushed one step through the dynamics; row i of the matrix is the
empirical distribution of the image cells. Out-of-domain images feed an
absorbing sink column, the attractor row and the sink row are unit
self-loops, and the noise-averaged matrices are convex combinations over
the quantized noise law.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ._io import fmt_float, fnv1a64, atomic_write_text, render_pfmat, read_pfmat
from .errors import ConfigurationError, CorruptFileError, ModelError, NumericError, UsageError
from .models import ControlGrid, NoiseModel, StageCost, SystemModel
from .partition import OUTSIDE, Partition, cell_samples, locate_many

DEFAULT_SINK_PENALTY = 1.0e6


@dataclass(frozen=True)
class TransferMatrix:
    """Sparse nonnegative matrix with its restriction status.

    ``kind='full'`` matrices are row stochastic over the whole index space;
    ``kind='restricted'`` matrices drop the attractor row/column and are
    row substochastic.
    """

    matrix: sparse.csr_matrix
    kind: str = "full"

    @property
    def shape(self):
        return self.matrix.shape

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


@dataclass(frozen=True)
class TransferEnsemble:
    """Everything the stabilization LP needs, plus provenance.

    ``full`` holds the noise-averaged matrix per action over the whole index
    space; ``restricted`` the same with the attractor removed. ``costs`` are
    the noise-averaged stage costs per action over the restricted indices,
    ``mass`` the reference measure (cell volumes, zero at the sink).
    """

    controls: ControlGrid
    noise: NoiseModel
    full: tuple
    restricted: tuple
    costs: tuple
    mass: np.ndarray
    sink_index: int | None
    grid_hash: str
    scheme: str
    samples_per_cell: int
    seed: int
    sink_penalty: float = DEFAULT_SINK_PENALTY

    @property
    def n_actions(self) -> int:
        return len(self.controls)

    @property
    def n_restricted(self) -> int:
        return int(self.mass.shape[0])

    @property
    def ordinary_cells(self) -> np.ndarray:
        """Indices of restricted states that carry reference mass."""
        idx = np.arange(self.n_restricted)
        if self.sink_index is None:
            return idx
        return idx[idx != self.sink_index]

    def validate(self) -> None:
        n = self.n_restricted
        if len(self.full) != self.n_actions or len(self.restricted) != self.n_actions:
            raise CorruptFileError("ensemble has inconsistent action count")
        for a, (fm, rm, g) in enumerate(zip(self.full, self.restricted, self.costs)):
            if fm.kind != "full" or rm.kind != "restricted":
                raise CorruptFileError(f"action {a}: matrix kinds are wrong")
            if fm.shape != (n + 1, n + 1) or rm.shape != (n, n):
                raise CorruptFileError(f"action {a}: matrix shapes are inconsistent")
            rs = fm.row_sums()
            bad = np.nonzero(np.abs(rs - 1.0) > 1e-12)[0]
            if bad.size:
                raise CorruptFileError(
                    f"action {a}: row {bad[0]} of full matrix sums to {rs[bad[0]]!r}, not 1"
                )
            if rm.matrix.nnz and rm.matrix.data.min() < 0:
                raise CorruptFileError(f"action {a}: negative transition entry")
            if np.any(rm.row_sums() > 1.0 + 1e-12):
                raise CorruptFileError(f"action {a}: restricted row sum exceeds 1")
            if g.shape != (n,) or np.any(g < 0):
                raise CorruptFileError(f"action {a}: invalid cost vector")
        if np.any(self.mass < 0):
            raise CorruptFileError("mass vector has negative entries")
        if self.sink_index is not None:
            if not 0 <= self.sink_index < n:
                raise CorruptFileError("sink index out of range")
            if self.mass[self.sink_index] != 0.0:
                raise CorruptFileError("sink must carry zero reference mass")
        if np.any(self.mass[self.ordinary_cells] <= 0):
            raise CorruptFileError("ordinary cells must carry positive reference mass")


def _image_indices(system: SystemModel, partition: Partition, points: np.ndarray,
                   u: float, xi: float) -> np.ndarray:
    """Map sample points one step and return full-space column indices."""
    images = system.step(points, u, xi)
    images = np.atleast_2d(np.asarray(images, dtype=float))
    if not np.all(np.isfinite(images)):
        bad = int(np.nonzero(~np.all(np.isfinite(images), axis=1))[0][0])
        per_cell = max(1, points.shape[0] // partition.n_ordinary)
        cell, k = divmod(bad, per_cell)
        raise NumericError(
            f"non-finite image for cell {cell}, sample {k}, "
            f"control {u!r}, noise {xi!r}"
        )
    cols = locate_many(partition, images)
    cols[cols == OUTSIDE] = partition.sink_index
    return cols


def sample_matrix(partition: Partition, samples_per_cell: int, scheme: str,
                  seed: int) -> np.ndarray:
    """All sample points of all ordinary cells, shape (n_ordinary * S, d)."""
    pts = [
        cell_samples(partition, c, samples_per_cell, scheme, seed)
        for c in range(partition.n_ordinary)
    ]
    return np.concatenate(pts, axis=0)


def build_pf_matrix(system: SystemModel, partition: Partition, u, xi,
                    samples_per_cell: int, scheme: str = "uniform-subgrid",
                    seed: int = 0, _points: np.ndarray | None = None) -> TransferMatrix:
    """Full transfer matrix for a single (control, noise value) pair."""
    if samples_per_cell < 1:
        raise UsageError("samples_per_cell must be >= 1")
    pts = _points if _points is not None else sample_matrix(
        partition, samples_per_cell, scheme, seed)
    n_ord = partition.n_ordinary
    n = partition.n_states
    cols = _image_indices(system, partition, pts, u, xi)
    rows = np.repeat(np.arange(n_ord, dtype=np.int64), samples_per_cell)
    data = np.full(cols.shape[0], 1.0 / samples_per_cell)
    mat = sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    # absorbing sink and attractor rows
    mat += sparse.csr_matrix(
        (np.ones(2), ([partition.sink_index, partition.attractor_index],
                      [partition.sink_index, partition.attractor_index])),
        shape=(n, n),
    )
    mat.sum_duplicates()
    mat.sort_indices()
    return TransferMatrix(matrix=mat, kind="full")


def average_over_noise(matrices, noise: NoiseModel) -> TransferMatrix:
    """Convex combination of per-noise-value matrices with weights ``v_l``."""
    mats = list(matrices)
    if len(mats) != len(noise):
        raise UsageError(
            f"got {len(mats)} matrices for a noise law with {len(noise)} values"
        )
    shape = mats[0].matrix.shape
    kind = mats[0].kind
    for tm in mats[1:]:
        if tm.matrix.shape != shape or tm.kind != kind:
            raise UsageError("matrices to average must share shape and kind")
    acc = noise.probs[0] * mats[0].matrix
    for w, tm in zip(noise.probs[1:], mats[1:]):
        acc = acc + w * tm.matrix
    acc = sparse.csr_matrix(acc)
    acc.sum_duplicates()
    acc.sort_indices()
    return TransferMatrix(matrix=acc, kind=kind)


def restrict(full: TransferMatrix) -> TransferMatrix:
    """Drop the attractor row and column (always the last index)."""
    if full.kind != "full":
        raise UsageError("restrict expects a full transfer matrix")
    n = full.matrix.shape[0]
    sub = sparse.csr_matrix(full.matrix[: n - 1, : n - 1])
    sub.sort_indices()
    return TransferMatrix(matrix=sub, kind="restricted")


def mass_vector(partition: Partition) -> np.ndarray:
    """Reference measure over restricted indices: cell volume, zero at sink."""
    m = np.full(partition.n_restricted, partition.cell_volume)
    m[partition.sink_index] = 0.0
    return m


def build_cost_table(cost: StageCost, partition: Partition, controls: ControlGrid,
                     noise: NoiseModel, samples_per_cell: int,
                     scheme: str = "uniform-subgrid", seed: int = 0,
                     sink_penalty: float = DEFAULT_SINK_PENALTY) -> list[np.ndarray]:
    """Noise-averaged per-action cost vectors over the restricted indices."""
    pts = sample_matrix(partition, samples_per_cell, scheme, seed)
    n_ord = partition.n_ordinary
    out = []
    for u in controls.values:
        acc = np.zeros(n_ord)
        for w, xi in zip(noise.probs, noise.values):
            vals = np.asarray(cost.g(pts, u, xi), dtype=float)
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise ModelError(
                    f"stage cost produced a negative or non-finite value at u={u!r}, xi={xi!r}"
                )
            acc += w * vals.reshape(n_ord, samples_per_cell).mean(axis=1)
        g = np.empty(partition.n_restricted)
        g[:n_ord] = acc
        g[partition.sink_index] = sink_penalty
        out.append(g)
    return out


def build_ensemble(system: SystemModel, cost: StageCost, partition: Partition,
                   controls: ControlGrid, noise: NoiseModel, samples_per_cell: int = 10,
                   scheme: str = "uniform-subgrid", seed: int = 0,
                   sink_penalty: float = DEFAULT_SINK_PENALTY,
                   threads: int = 1) -> TransferEnsemble:
    """Build the full per-action ensemble (matrices, costs, mass, provenance).

    Work items are independent per action, so matrix construction may run on
    a small thread pool; the result does not depend on the thread count.
    """
    threads = _effective_threads(threads)
    pts = sample_matrix(partition, samples_per_cell, scheme, seed)

    def one_action(u: float) -> TransferMatrix:
        per_noise = [
            build_pf_matrix(system, partition, u, xi, samples_per_cell,
                            scheme, seed, _points=pts)
            for xi in noise.values
        ]
        return average_over_noise(per_noise, noise)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            full = list(pool.map(one_action, controls.values))
    else:
        full = [one_action(u) for u in controls.values]
    restricted = [restrict(fm) for fm in full]
    costs = build_cost_table(cost, partition, controls, noise, samples_per_cell,
                             scheme, seed, sink_penalty)
    ensemble = TransferEnsemble(
        controls=controls,
        noise=noise,
        full=tuple(full),
        restricted=tuple(restricted),
        costs=tuple(costs),
        mass=mass_vector(partition),
        sink_index=partition.sink_index,
        grid_hash=partition.grid_hash(),
        scheme=scheme,
        samples_per_cell=samples_per_cell,
        seed=seed,
        sink_penalty=sink_penalty,
    )
    ensemble.validate()
    return ensemble


def ensemble_from_matrices(restricted_matrices, costs, mass,
                           control_values=None, sink_index: int | None = None,
                           noise: NoiseModel | None = None,
                           grid_hash: str = "none") -> TransferEnsemble:
    """Assemble an ensemble directly from restricted matrices.

    Intended for hand-built instances (small fixtures, external matrices);
    the full matrices are completed with an attractor column absorbing the
    missing row mass.
    """
    restricted = []
    for mat in restricted_matrices:
        csr = sparse.csr_matrix(np.asarray(mat, dtype=float) if not sparse.issparse(mat) else mat)
        restricted.append(TransferMatrix(matrix=csr, kind="restricted"))
    n = restricted[0].shape[0]
    mass = np.asarray(mass, dtype=float)
    if control_values is None:
        control_values = np.arange(len(restricted), dtype=float)
    full = []
    for rm in restricted:
        deficit = np.clip(1.0 - rm.row_sums(), 0.0, None)
        deficit[np.abs(deficit) < 1e-15] = 0.0
        top = sparse.hstack([rm.matrix, sparse.csr_matrix(deficit[:, None])])
        bottom = sparse.csr_matrix(
            (np.ones(1), (np.zeros(1, dtype=int), np.array([n]))), shape=(1, n + 1)
        )
        fm = sparse.csr_matrix(sparse.vstack([top, bottom]))
        fm.sum_duplicates()
        fm.sort_indices()
        full.append(TransferMatrix(matrix=fm, kind="full"))
    ensemble = TransferEnsemble(
        controls=ControlGrid(np.asarray(control_values, dtype=float)),
        noise=noise if noise is not None else NoiseModel(np.array([0.0]), np.array([1.0])),
        full=tuple(full),
        restricted=tuple(restricted),
        costs=tuple(np.asarray(g, dtype=float) for g in costs),
        mass=mass,
        sink_index=sink_index,
        grid_hash=grid_hash,
        scheme="external",
        samples_per_cell=0,
        seed=0,
    )
    ensemble.validate()
    return ensemble


def _effective_threads(requested: int) -> int:
    cap = os.environ.get("PFSTAB_THREADS")
    n = max(1, int(requested))
    if cap is not None:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigurationError(f"PFSTAB_THREADS must be an integer, got {cap!r}")
    return n


# ---------------------------------------------------------------------------
# persistence

def save_ensemble(ensemble: TransferEnsemble, path: str) -> None:
    """Write the ensemble manifest plus one pfmat file per action.

    ``path`` is the manifest file; matrices land next to it in a
    ``<stem>_matrices/`` directory.
    """
    ensemble.validate()
    base = os.path.abspath(path)
    stem = os.path.splitext(os.path.basename(base))[0]
    matdir_name = f"{stem}_matrices"
    matdir = os.path.join(os.path.dirname(base), matdir_name)
    os.makedirs(matdir, exist_ok=True)

    lines = ["pfensemble 1"]
    lines.append(f"grid_hash {ensemble.grid_hash}")
    lines.append(f"n_restricted {ensemble.n_restricted}")
    sink = -1 if ensemble.sink_index is None else ensemble.sink_index
    lines.append(f"sink_index {sink}")
    lines.append(f"scheme {ensemble.scheme}")
    lines.append(f"samples_per_cell {ensemble.samples_per_cell}")
    lines.append(f"seed {ensemble.seed}")
    lines.append(f"sink_penalty {fmt_float(ensemble.sink_penalty)}")
    lines.append(f"noise_count {len(ensemble.noise)}")
    for xi, w in zip(ensemble.noise.values, ensemble.noise.probs):
        lines.append(f"noise {fmt_float(xi)} {fmt_float(w)}")
    lines.append(f"actions {ensemble.n_actions}")
    for a, u in enumerate(ensemble.controls.values):
        rel = f"{matdir_name}/action_{a:03d}.pfmat"
        lines.append(f"action {a} {fmt_float(u)} {rel}")
        atomic_write_text(os.path.join(matdir, f"action_{a:03d}.pfmat"),
                          render_pfmat(ensemble.full[a].matrix))
    for a in range(ensemble.n_actions):
        lines.append(f"cost {a}")
        lines.extend(fmt_float(v) for v in ensemble.costs[a])
    lines.append("mass")
    lines.extend(fmt_float(v) for v in ensemble.mass)
    body = "\n".join(lines) + "\n"
    digest = fnv1a64(body.encode("ascii"))
    atomic_write_text(base, body + f"checksum {digest:016x}\n")


def load_ensemble(path: str) -> TransferEnsemble:
    """Read a manifest written by :func:`save_ensemble`, validating everything."""
    with open(path, "r") as fh:
        text = fh.read()
    idx = text.rfind("checksum ")
    if idx < 0:
        raise CorruptFileError(f"{path}: missing checksum line (truncated file?)")
    body, tail = text[:idx], text[idx:]
    stated = tail.split()
    if len(stated) != 2 or f"{fnv1a64(body.encode('ascii')):016x}" != stated[1]:
        raise CorruptFileError(f"{path}: manifest checksum mismatch")

    lines = body.splitlines()
    if not lines or lines[0] != "pfensemble 1":
        raise CorruptFileError(f"{path}: bad manifest header")
    meta: dict = {}
    noise_vals: list[float] = []
    noise_probs: list[float] = []
    actions: dict[int, tuple[float, str]] = {}
    costs: dict[int, list[float]] = {}
    mass: list[float] = []
    mode = None
    current_cost: list[float] | None = None
    try:
        for line in lines[1:]:
            toks = line.split()
            key = toks[0]
            if key == "noise":
                noise_vals.append(float(toks[1]))
                noise_probs.append(float(toks[2]))
            elif key == "action":
                actions[int(toks[1])] = (float(toks[2]), toks[3])
            elif key == "cost":
                current_cost = []
                costs[int(toks[1])] = current_cost
                mode = "cost"
            elif key == "mass":
                mode = "mass"
            elif len(toks) == 1 and mode in ("cost", "mass"):
                (current_cost if mode == "cost" else mass).append(float(toks[0]))
            else:
                meta[key] = toks[1]
                mode = None
    except (IndexError, ValueError) as exc:
        raise CorruptFileError(f"{path}: malformed manifest line {line!r}") from exc

    n = int(meta["n_restricted"])
    n_actions = int(meta["actions"])
    sink = int(meta["sink_index"])
    base_dir = os.path.dirname(os.path.abspath(path))
    full, restricted, cost_list, control_values = [], [], [], []
    for a in range(n_actions):
        if a not in actions or a not in costs:
            raise CorruptFileError(f"{path}: missing action {a} blocks")
        u, rel = actions[a]
        control_values.append(u)
        mat = read_pfmat(os.path.join(base_dir, rel))
        if mat.shape != (n + 1, n + 1):
            raise CorruptFileError(
                f"{path}: matrix for action {a} has shape {mat.shape}, expected {(n + 1, n + 1)}"
            )
        tm = TransferMatrix(matrix=mat, kind="full")
        full.append(tm)
        restricted.append(restrict(tm))
        g = np.asarray(costs[a], dtype=float)
        if g.shape != (n,):
            raise CorruptFileError(f"{path}: cost vector for action {a} has wrong length")
        cost_list.append(g)

    ensemble = TransferEnsemble(
        controls=ControlGrid(np.asarray(control_values)),
        noise=NoiseModel(np.asarray(noise_vals), np.asarray(noise_probs)),
        full=tuple(full),
        restricted=tuple(restricted),
        costs=tuple(cost_list),
        mass=np.asarray(mass, dtype=float),
        sink_index=None if sink < 0 else sink,
        grid_hash=meta["grid_hash"],
        scheme=meta["scheme"],
        samples_per_cell=int(meta["samples_per_cell"]),
        seed=int(meta["seed"]),
        sink_penalty=float(meta["sink_penalty"]),
    )
    ensemble.validate()
    return ensemble
