"""Uniform box partition of a compact state space.

The index space has three kinds of entries:

* ordinary cells ``0 .. n_ordinary-1`` (grid boxes, row-major, skipping
  boxes lumped into the attractor),
* one sink index ``n_ordinary`` that receives out-of-domain transition
  mass (it has no geometric extent),
* one attractor index ``n_ordinary + 1`` (always the largest) holding
  every grid box that intersects the attractor region.

Cell membership uses half-open boxes ``[lo, hi)`` except the last cell
per dimension, which is closed, so lookup is total on the domain.
Wrapped (periodic) dimensions are reduced modulo their span first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._io import fnv1a64, fmt_float
from .errors import ConfigurationError, UsageError

#: Sentinel returned by :func:`locate` for points outside the domain.
OUTSIDE = -1

_SCHEMES = ("uniform-subgrid", "stratified-random")


@dataclass(frozen=True)
class Partition:
    """Immutable uniform box grid with attractor lumping and a sink index."""

    bounds: np.ndarray          # (d, 2) closed intervals
    counts: np.ndarray          # (d,) cells per dimension
    wrap: np.ndarray            # (d,) periodic flags
    attractor_cells: frozenset  # flat original-grid ids lumped into the attractor
    # derived, filled by build_grid
    widths: np.ndarray = field(default=None, repr=False)
    ordinary_of_original: np.ndarray = field(default=None, repr=False)
    original_of_ordinary: np.ndarray = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def n_original(self) -> int:
        return int(np.prod(self.counts))

    @property
    def n_ordinary(self) -> int:
        return self.n_original - len(self.attractor_cells)

    @property
    def sink_index(self) -> int:
        return self.n_ordinary

    @property
    def attractor_index(self) -> int:
        return self.n_ordinary + 1

    @property
    def n_states(self) -> int:
        """Total index-space size: ordinary cells + sink + attractor."""
        return self.n_ordinary + 2

    @property
    def n_restricted(self) -> int:
        """Size after dropping the attractor (ordinary cells + sink)."""
        return self.n_ordinary + 1

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def grid_hash(self) -> str:
        """FNV-1a 64 hash of the geometric definition, for artifact staleness checks."""
        parts = ["grid"]
        for lo, hi in self.bounds:
            parts.append(fmt_float(lo))
            parts.append(fmt_float(hi))
        parts.extend(str(c) for c in self.counts)
        parts.extend("w" if w else "-" for w in self.wrap)
        parts.extend(str(c) for c in sorted(self.attractor_cells))
        return f"{fnv1a64(' '.join(parts).encode('ascii')):016x}"


def build_grid(bounds, counts, wrap, attractor_region) -> Partition:
    """Build a uniform grid and lump every cell intersecting ``attractor_region``.

    Parameters
    ----------
    bounds : array-like (d, 2)
        Closed interval per dimension, lower < upper.
    counts : array-like (d,)
        Number of cells per dimension, each at least 2.
    wrap : array-like (d,) of bool
        Periodic flags; a wrapped dimension identifies its two endpoints.
    attractor_region : array-like (d, 2)
        Axis-aligned box around the target set. Cells with positive-volume
        overlap are lumped into the single attractor index.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    d = bounds.shape[0]
    counts = np.asarray(counts, dtype=np.int64).reshape(d)
    wrap = np.asarray(wrap, dtype=bool).reshape(d)
    region = np.asarray(attractor_region, dtype=float).reshape(d, 2)

    if np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ConfigurationError("each dimension needs lower < upper bound")
    if np.any(counts < 2):
        raise ConfigurationError("need at least 2 cells per dimension")
    if not np.all(np.isfinite(bounds)) or not np.all(np.isfinite(region)):
        raise ConfigurationError("bounds and attractor region must be finite")

    widths = (bounds[:, 1] - bounds[:, 0]) / counts
    if np.any(region[:, 1] <= bounds[:, 0]) or np.any(region[:, 0] >= bounds[:, 1]):
        raise ConfigurationError("attractor region does not intersect the grid interior")

    # Per-dimension cells with positive-volume overlap with the region.
    # Cells that merely touch the region boundary are excluded; the 1e-9
    # cell-fraction tolerance keeps the selection stable when region edges
    # fall exactly on cell edges.
    tol = 1e-9
    ranges = []
    for k in range(d):
        a = (region[k, 0] - bounds[k, 0]) / widths[k]
        b = (region[k, 1] - bounds[k, 0]) / widths[k]
        cand = np.arange(max(0, int(np.floor(a)) - 1),
                         min(int(counts[k]), int(np.ceil(b)) + 1))
        keep = cand[((cand + 1) - a > tol) & (b - cand > tol)]
        ranges.append(keep)
    if any(r.size == 0 for r in ranges):
        raise ConfigurationError("attractor region covers no grid cell")
    mesh = np.meshgrid(*ranges, indexing="ij")
    flat = np.zeros_like(mesh[0])
    for k in range(d):
        flat = flat * counts[k] + mesh[k]
    lumped = frozenset(int(i) for i in flat.ravel())

    n_original = int(np.prod(counts))
    if not lumped:
        raise ConfigurationError("attractor region covers no grid cell")
    if len(lumped) >= n_original:
        raise ConfigurationError("attractor region covers every grid cell")

    ordinary_of_original = np.full(n_original, -1, dtype=np.int64)
    mask = np.ones(n_original, dtype=bool)
    mask[list(lumped)] = False
    ordinary_ids = np.nonzero(mask)[0]
    ordinary_of_original[ordinary_ids] = np.arange(ordinary_ids.size)

    part = Partition(
        bounds=bounds,
        counts=counts,
        wrap=wrap,
        attractor_cells=lumped,
        widths=widths,
        ordinary_of_original=ordinary_of_original,
        original_of_ordinary=ordinary_ids,
    )
    bounds.setflags(write=False)
    counts.setflags(write=False)
    wrap.setflags(write=False)
    widths.setflags(write=False)
    ordinary_of_original.setflags(write=False)
    ordinary_ids.setflags(write=False)
    return part


def default_attractor_region(bounds, counts, center=None, halfwidths=None) -> np.ndarray:
    """Axis-aligned attractor box, defaulting to one cell half-width at the origin."""
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    counts = np.asarray(counts, dtype=np.int64).reshape(bounds.shape[0])
    widths = (bounds[:, 1] - bounds[:, 0]) / counts
    if center is None:
        center = np.zeros(bounds.shape[0])
    center = np.asarray(center, dtype=float)
    if halfwidths is None:
        halfwidths = widths
    halfwidths = np.asarray(halfwidths, dtype=float)
    return np.column_stack([center - halfwidths, center + halfwidths])


def wrap_point(partition: Partition, points: np.ndarray) -> np.ndarray:
    """Reduce wrapped coordinates into ``[lo, hi)``; other coordinates pass through."""
    pts = np.array(points, dtype=float, copy=True)
    pts2 = np.atleast_2d(pts)
    for k in range(partition.dim):
        if partition.wrap[k]:
            lo, hi = partition.bounds[k]
            pts2[:, k] = lo + np.mod(pts2[:, k] - lo, hi - lo)
    return pts2.reshape(np.shape(points))


def locate_many(partition: Partition, points) -> np.ndarray:
    """Vectorized point-to-index lookup.

    Returns an int64 array over the full index space: ordinary index,
    attractor index for lumped cells, or :data:`OUTSIDE`. The sink index is
    never returned (it has no geometric extent).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != partition.dim:
        raise UsageError(
            f"points have dimension {pts.shape[1]}, partition has {partition.dim}"
        )
    n = pts.shape[0]
    out = np.full(n, OUTSIDE, dtype=np.int64)
    bad = ~np.all(np.isfinite(pts), axis=1)

    idx = np.zeros(n, dtype=np.int64)
    inside = ~bad
    for k in range(partition.dim):
        lo, hi = partition.bounds[k]
        x = pts[:, k]
        if partition.wrap[k]:
            x = lo + np.mod(x - lo, hi - lo)
        cell = np.floor((x - lo) / partition.widths[k]).astype(np.int64)
        # last cell per dimension is closed
        at_top = x == hi
        cell[at_top] = partition.counts[k] - 1
        inside &= (x >= lo) & (x <= hi)
        cell = np.clip(cell, 0, partition.counts[k] - 1)
        idx = idx * partition.counts[k] + cell

    full = np.where(
        partition.ordinary_of_original[idx] >= 0,
        partition.ordinary_of_original[idx],
        partition.attractor_index,
    )
    out[inside] = full[inside]
    return out


def locate(partition: Partition, point) -> int:
    """Index of the cell containing ``point`` (scalar form of :func:`locate_many`)."""
    return int(locate_many(partition, np.asarray(point, dtype=float)[None, :])[0])


def balanced_factors(n: int, d: int) -> list[int]:
    """Factor ``n`` into ``d`` integers as near-equal as possible (descending).

    Used for the centered sample sublattice: 10 samples in 2-D become 5x2.
    """
    if d == 1:
        return [n]
    best = None
    target = n ** (1.0 / d)
    for f in range(1, n + 1):
        if n % f:
            continue
        rest = balanced_factors(n // f, d - 1)
        cand = sorted([f] + rest, reverse=True)
        score = max(cand) - min(cand)
        if best is None or score < best[0] or (score == best[0] and abs(cand[0] - target) < abs(best[1][0] - target)):
            best = (score, cand)
    return best[1]


def ordinary_multi_index(partition: Partition, cells=None) -> np.ndarray:
    """Per-dimension grid coordinates of ordinary cells, shape (n, d)."""
    if cells is None:
        originals = partition.original_of_ordinary
    else:
        cells = np.asarray(cells, dtype=np.int64)
        originals = partition.original_of_ordinary[cells]
    coords = np.empty((originals.size, partition.dim), dtype=np.int64)
    rem = originals.copy()
    for k in range(partition.dim - 1, -1, -1):
        coords[:, k] = rem % partition.counts[k]
        rem //= partition.counts[k]
    return coords


def ordinary_centers(partition: Partition) -> np.ndarray:
    """Geometric centers of the ordinary cells, shape (n_ordinary, d)."""
    coords = ordinary_multi_index(partition)
    return partition.bounds[:, 0] + (coords + 0.5) * partition.widths


def cell_samples(partition: Partition, cell: int, samples_per_cell: int,
                 scheme: str = "uniform-subgrid", seed: int = 0) -> np.ndarray:
    """Sample points strictly inside an ordinary cell.

    ``uniform-subgrid`` places a centered sublattice shaped by
    :func:`balanced_factors` and ignores the seed; ``stratified-random``
    draws one point per sublattice stratum from a generator derived from
    ``(seed, cell)``, so repeated calls are identical.
    """
    if scheme not in _SCHEMES:
        raise UsageError(f"unknown sampling scheme {scheme!r}; expected one of {_SCHEMES}")
    if samples_per_cell < 1:
        raise UsageError("samples_per_cell must be >= 1")
    cell = int(cell)
    if not 0 <= cell < partition.n_ordinary:
        raise UsageError(
            f"cell {cell} is not an ordinary cell (sink and attractor have no samples)"
        )
    coords = ordinary_multi_index(partition, [cell])[0]
    lo = partition.bounds[:, 0] + coords * partition.widths

    factors = balanced_factors(samples_per_cell, partition.dim)
    axes = [(np.arange(f) + 0.5) / f for f in factors]
    mesh = np.meshgrid(*axes, indexing="ij")
    offsets = np.stack([m.ravel() for m in mesh], axis=1)
    if scheme == "stratified-random":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), cell]))
        jitter = (rng.random(offsets.shape) - 0.5) / np.asarray(factors)
        offsets = offsets + jitter
    return lo + offsets * partition.widths
