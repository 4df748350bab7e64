"""Row and column interpolative decompositions via truncated column-pivoted QR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


@dataclass(frozen=True, eq=False)
class IdFactor:
    """``M ~= interp @ M[skeleton, :]`` (row ID) or ``M[:, skeleton] @ interp.T`` (column ID).

    ``interp`` restricted to the skeleton rows is the identity.
    """

    interp: np.ndarray
    skeleton: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.skeleton)


def _pivoted_qr_rank(Mt, eps, r_max, atol):
    """Pivoted QR of ``Mt`` (columns are candidate skeletons) and truncation rank."""
    q, r, piv = sla.qr(Mt, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return r, piv, 0
    thresh = max(eps * diag[0], atol)
    rank = int(np.count_nonzero(diag > thresh))
    # pivoted QR diagonals are non-increasing up to rounding; cut at first drop
    below = np.flatnonzero(diag <= thresh)
    if below.size:
        rank = int(below[0])
    if r_max is not None:
        rank = min(rank, int(r_max))
    return r, piv, rank


def row_id(M, eps: float, r_max: int | None = None, atol: float = 0.0) -> IdFactor:
    """Select skeleton rows of ``M`` so that ``M ~= U @ M[skel]``.

    Truncation happens where the pivoted-QR diagonal of ``M^T`` falls to
    ``eps`` times its first entry (or below ``atol``).
    """
    M = np.asarray(M)
    if not np.all(np.isfinite(M)):
        raise ValueError("row_id: input contains non-finite values")
    m, n = M.shape
    dtype = np.result_type(M.dtype, np.float64)
    if m == 0 or n == 0:
        return IdFactor(np.zeros((m, 0), dtype=dtype), np.zeros(0, dtype=np.int64))
    r, piv, rank = _pivoted_qr_rank(M.T, eps, r_max, atol)
    U = np.zeros((m, rank), dtype=dtype)
    if rank:
        U[piv[:rank]] = np.eye(rank, dtype=dtype)
        if rank < m:
            coef = sla.solve_triangular(r[:rank, :rank], r[:rank, rank:], check_finite=False)
            U[piv[rank:]] = coef.T
    return IdFactor(U, piv[:rank].astype(np.int64))


def col_id(M, eps: float, r_max: int | None = None, atol: float = 0.0) -> IdFactor:
    """Select skeleton columns so that ``M ~= M[:, skel] @ V.T``."""
    M = np.asarray(M)
    return row_id(M.T, eps, r_max, atol)
