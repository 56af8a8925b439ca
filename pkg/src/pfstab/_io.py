"""Low-level persistence helpers: checksums, the pfmat sparse-matrix format,
and atomic file writes.

pfmat format (text, one matrix per file)::

    pfmat 1 <nrows> <ncols> <nnz>
    <row> <col> <value>          # nnz lines, 0-based, row-major order
    checksum <16 hex digits>     # FNV-1a 64 over every byte above

Values are written with 17 significant digits so doubles round-trip exactly.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
from scipy import sparse

from .errors import CorruptFileError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    """FNV-1a 64-bit hash of ``data``, optionally continuing from ``h``."""
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _FNV_MASK
    return h


def fmt_float(x: float) -> str:
    """Format a double with 17 significant digits (lossless round-trip)."""
    return format(float(x), ".17g")


def atomic_write_text(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file + rename (no partial files)."""
    atomic_write_bytes(path, text.encode("ascii"))


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_pfmat(matrix: sparse.spmatrix) -> str:
    """Serialize a sparse matrix to pfmat text (checksum line included)."""
    csr = sparse.csr_matrix(matrix)
    csr.sum_duplicates()
    csr.sort_indices()
    coo = csr.tocoo()
    lines = [f"pfmat 1 {csr.shape[0]} {csr.shape[1]} {coo.nnz}"]
    for r, c, v in zip(coo.row, coo.col, coo.data):
        lines.append(f"{r} {c} {fmt_float(v)}")
    body = "\n".join(lines) + "\n"
    digest = fnv1a64(body.encode("ascii"))
    return body + f"checksum {digest:016x}\n"


def write_pfmat(matrix: sparse.spmatrix, path: str) -> None:
    atomic_write_text(path, render_pfmat(matrix))


def parse_pfmat(text: str, path: str = "<string>") -> sparse.csr_matrix:
    """Parse pfmat text, validating checksum, counts, and row-major order."""
    idx = text.rfind("checksum ")
    if idx < 0:
        raise CorruptFileError(f"{path}: missing checksum line (truncated file?)")
    body, tail = text[:idx], text[idx:]
    stated = tail.split()
    if len(stated) != 2 or len(stated[1]) != 16:
        raise CorruptFileError(f"{path}: malformed checksum line")
    digest = fnv1a64(body.encode("ascii"))
    if f"{digest:016x}" != stated[1]:
        raise CorruptFileError(f"{path}: checksum mismatch (corrupt or truncated file)")

    lines = body.splitlines()
    if not lines:
        raise CorruptFileError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 5 or header[0] != "pfmat" or header[1] != "1":
        raise CorruptFileError(f"{path}: bad pfmat header {lines[0]!r}")
    try:
        nrows, ncols, nnz = int(header[2]), int(header[3]), int(header[4])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: non-integer header field") from exc
    if len(lines) - 1 != nnz:
        raise CorruptFileError(
            f"{path}: expected {nnz} entries, found {len(lines) - 1}"
        )

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.float64)
    for k, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != 3:
            raise CorruptFileError(f"{path}: malformed entry line {k + 2}")
        rows[k] = int(parts[0])
        cols[k] = int(parts[1])
        vals[k] = float(parts[2])
    if nnz:
        if rows.min() < 0 or rows.max() >= nrows or cols.min() < 0 or cols.max() >= ncols:
            raise CorruptFileError(f"{path}: entry index out of bounds")
        order = rows * ncols + cols
        if np.any(np.diff(order) <= 0):
            raise CorruptFileError(f"{path}: entries not in strict row-major order")
    return sparse.csr_matrix((vals, (rows, cols)), shape=(nrows, ncols))


def read_pfmat(path: str) -> sparse.csr_matrix:
    with open(path, "r") as fh:
        text = fh.read()
    return parse_pfmat(text, path)
