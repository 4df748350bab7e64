"""Compressed sparse row storage, Matrix Market I/O and permutations.

Indices are 0-based in memory and 1-based on disk.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MatrixMarketError(ValueError):
    """Raised when a Matrix Market file cannot be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix with sorted, unique column indices in every row.

    Explicit zeros are kept and counted in ``nnz``.
    """

    nrows: int
    ncols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if len(self.indptr) != self.nrows + 1:
            raise ValueError("indptr must have nrows + 1 entries")
        if self.indptr[-1] != len(self.indices) or len(self.indices) != len(self.data):
            raise ValueError("inconsistent CSR arrays")
        for arr in (self.indptr, self.indices, self.data):
            arr.setflags(write=False)

    @classmethod
    def from_scipy(cls, A) -> "SparseMatrix":
        A = sp.csr_matrix(A)
        A.sum_duplicates()
        A.sort_indices()
        data = A.data
        if not np.iscomplexobj(data):
            data = data.astype(np.float64, copy=False)
        else:
            data = data.astype(np.complex128, copy=False)
        return cls(A.shape[0], A.shape[1], A.indptr.astype(np.int64),
                   A.indices.astype(np.int64), data.copy())

    @classmethod
    def from_dense(cls, M) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(M)))

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @cached_property
    def scipy(self) -> sp.csr_matrix:
        """Read-only scipy view sharing the same buffers."""
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def toarray(self) -> np.ndarray:
        return self.scipy.toarray()

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.nrows), np.diff(self.indptr))

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.scipy.T.tocsr())

    def __matmul__(self, x):
        return spmv(self, x)


@dataclass(frozen=True, eq=False)
class Permutation:
    """Bijection on ``{0..N-1}``; ``forward[new] = old``."""

    forward: np.ndarray = field(repr=False)

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int64)
        n = len(fwd)
        if n and (fwd.min() < 0 or fwd.max() >= n or len(np.unique(fwd)) != n):
            raise ValueError("forward map is not a permutation")
        object.__setattr__(self, "forward", fwd)

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    def __len__(self):
        return len(self.forward)

    @cached_property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.forward)
        inv[self.forward] = np.arange(len(self.forward))
        return inv

    def compose(self, other: "Permutation") -> "Permutation":
        """Apply ``self`` first, then ``other`` on the reordered indices."""
        return Permutation(self.forward[other.forward])


def spmv(A: SparseMatrix, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[0] != A.ncols:
        raise ValueError(f"dimension mismatch: A has {A.ncols} columns, x has {x.shape[0]} rows")
    return A.scipy @ x


def permute_symmetric(A: SparseMatrix, p: Permutation) -> SparseMatrix:
    """Return ``B`` with ``B[i, j] = A[p(i), p(j)]``."""
    if A.nrows != A.ncols:
        raise ValueError("permute_symmetric requires a square matrix")
    if len(p) != A.nrows:
        raise ValueError("permutation length does not match matrix size")
    fwd = p.forward
    B = A.scipy[fwd][:, fwd]
    return SparseMatrix.from_scipy(B)


def gather_sparse(A: SparseMatrix, rows, cols) -> np.ndarray:
    """Dense ``A[rows][:, cols]``; entries absent from the pattern are zero."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= A.nrows):
        raise IndexError("row index out of range")
    if cols.size and (cols.min() < 0 or cols.max() >= A.ncols):
        raise IndexError("column index out of range")
    if rows.size == 0 or cols.size == 0:
        return np.zeros((rows.size, cols.size), dtype=A.dtype)
    return A.scipy[rows][:, cols].toarray()


def gather_pairs(A: SparseMatrix, ri, ci) -> np.ndarray:
    """Values ``A[ri[k], ci[k]]`` for flat index arrays (zero if absent)."""
    ri = np.asarray(ri, dtype=np.int64)
    ci = np.asarray(ci, dtype=np.int64)
    out = np.zeros(ri.shape, dtype=A.dtype)
    if ri.size == 0:
        return out
    keys = _pattern_keys(A)
    q = ri * A.ncols + ci
    pos = np.searchsorted(keys, q)
    pos = np.minimum(pos, len(keys) - 1) if len(keys) else pos
    if len(keys):
        hit = keys[pos] == q
        out[hit] = A.data[pos[hit]]
    return out


def _pattern_keys(A: SparseMatrix) -> np.ndarray:
    cache = A.__dict__.get("_keys")
    if cache is None:
        cache = A.row_ids() * A.ncols + A.indices
        object.__setattr__(A, "_keys", cache)
    return cache


# --- Matrix Market ---------------------------------------------------------

def load_matrix_market(path) -> SparseMatrix:
    """Read a coordinate Matrix Market file (real/integer/complex, general/symmetric)."""
    path = Path(path)
    with path.open("r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError("empty file", 1)
    header = lines[0].split()
    if len(header) != 5 or header[0].lower() != "%%matrixmarket":
        raise MatrixMarketError("missing %%MatrixMarket banner", 1)
    obj, fmt, field_, symm = (h.lower() for h in header[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(f"unsupported format '{obj} {fmt}'", 1)
    if field_ == "pattern":
        raise MatrixMarketError("pattern-only matrices are not supported", 1)
    if field_ not in ("real", "integer", "complex", "double"):
        raise MatrixMarketError(f"unsupported field '{field_}'", 1)
    if symm not in ("general", "symmetric"):
        raise MatrixMarketError(f"unsupported symmetry '{symm}'", 1)
    is_complex = field_ == "complex"
    nval = 2 if is_complex else 1

    lineno = 1
    size = None
    while lineno < len(lines):
        s = lines[lineno].strip()
        lineno += 1
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise MatrixMarketError("size line must hold 'rows cols nnz'", lineno)
        try:
            size = tuple(int(t) for t in parts)
        except ValueError:
            raise MatrixMarketError("non-integer size line", lineno) from None
        break
    if size is None:
        raise MatrixMarketError("missing size line", lineno)
    m, n, nnz = size

    ri = np.empty(nnz, dtype=np.int64)
    ci = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.complex128 if is_complex else np.float64)
    k = 0
    while lineno < len(lines) and k < nnz:
        s = lines[lineno].strip()
        lineno += 1
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if len(parts) != 2 + nval:
            raise MatrixMarketError(f"expected {2 + nval} fields, got {len(parts)}", lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
            v = complex(float(parts[2]), float(parts[3])) if is_complex else float(parts[2])
        except ValueError:
            raise MatrixMarketError("could not parse entry", lineno) from None
        if not (1 <= i <= m and 1 <= j <= n):
            raise MatrixMarketError(f"index ({i}, {j}) outside {m}x{n}", lineno)
        ri[k], ci[k], vals[k] = i - 1, j - 1, v
        k += 1
    if k != nnz:
        raise MatrixMarketError(f"expected {nnz} entries, found {k}", lineno)
    if symm == "symmetric":
        off = ri != ci
        ri, ci, vals = (np.concatenate([ri, ci[off]]), np.concatenate([ci, ri[off]]),
                        np.concatenate([vals, vals[off]]))
    A = sp.coo_matrix((vals, (ri, ci)), shape=(m, n)).tocsr()
    return SparseMatrix.from_scipy(A)


def write_matrix_market(A: SparseMatrix, path, comment: str | None = None) -> None:
    """Write ``A`` in general coordinate format with full round-trip precision."""
    field_ = "complex" if A.is_complex else "real"
    rows = A.row_ids() + 1
    cols = A.indices + 1
    with Path(path).open("w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate {field_} general\n")
        if comment:
            for line in comment.splitlines():
                fh.write(f"% {line}\n")
        fh.write(f"{A.nrows} {A.ncols} {A.nnz}\n")
        if A.is_complex:
            for i, j, v in zip(rows, cols, A.data):
                fh.write(f"{i} {j} {float(v.real)!r} {float(v.imag)!r}\n")
        else:
            for i, j, v in zip(rows, cols, A.data):
                fh.write(f"{i} {j} {float(v)!r}\n")
