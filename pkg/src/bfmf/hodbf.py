"""Hierarchically off-diagonal butterfly (HOD-BF) matrices and their inversion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .butterfly import (DEFAULT_ALPHA, DEFAULT_KNN, ButterflyMatrix, DenseOracle, EntryOracle,
                        MatvecOracle, PartitionPair, bf_entry_eval, bf_extract, bf_matvec,
                        bf_max_rank, bf_memory, bf_random_matvec, bf_to_dense,
                        entry_eval_generator, run_generators)
from .counters import add_flops, gemm_flops
from .ordering import HierarchicalPartition


class SingularBlockError(ArithmeticError):
    """A dense block met during inversion is exactly singular."""


def lu_factor_quiet(M):
    """``lu_factor`` without scipy's singular-matrix warning; callers check the pivots."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        return sla.lu_factor(M, check_finite=False)


@dataclass(eq=False)
class HodbfMatrix:
    """Dense leaf diagonals plus butterfly sibling blocks over ``tree``.

    ``offdiag[(l, i)] = (upper, lower)`` holds the butterflies for
    ``A(T1, T2)`` and ``A(T2, T1)`` where ``T1, T2`` are the children of node
    ``(l, i)``.
    """

    tree: HierarchicalPartition
    dtype: object
    leaves: list
    offdiag: dict

    @property
    def n(self) -> int:
        return self.tree.n

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def levels(self) -> int:
        return self.tree.levels

    def matvec(self, X):
        return hodbf_matvec(self, X)

    def rmatvec(self, Y):
        return hodbf_matvec(self, Y, transpose=True)

    def toarray(self):
        return hodbf_to_dense(self)

    def butterflies(self):
        for pair in self.offdiag.values():
            yield from pair


def _children(tree, l, i):
    a1, b1 = tree.node(l + 1, 2 * i)
    a2, b2 = tree.node(l + 1, 2 * i + 1)
    return (a1, b1), (a2, b2)


def sibling_pairs(tree: HierarchicalPartition, l, i):
    """Partition pairs for the upper and lower sibling blocks of node ``(l, i)``."""
    t1 = tree.subtree(l + 1, 2 * i)
    t2 = tree.subtree(l + 1, 2 * i + 1)
    return PartitionPair(t1, t2), PartitionPair(t2, t1)


def _leaf_generator(tree):
    reqs = [(np.arange(a, b), np.arange(a, b)) for a, b in tree.leaves()]
    blocks = yield reqs
    return blocks


def hodbf_entry_eval(oracle: EntryOracle, tree: HierarchicalPartition, eps,
                     alpha=DEFAULT_ALPHA, k_nn=DEFAULT_KNN, rmax=None, atol=0.0) -> HodbfMatrix:
    """Compress ``oracle`` (square, positions of ``tree``) into HOD-BF form.

    All off-diagonal constructions run in lock-step so each round of requests
    reaches the oracle as a single batched extraction.
    """
    n = tree.n
    if tuple(oracle.shape) != (n, n):
        raise ValueError("oracle shape does not match the tree")
    dtype = np.dtype(oracle.dtype)
    nb = oracle.neighbors
    jobs = [(_leaf_generator(tree), 0, 0)]
    keys = []
    for l in range(tree.levels):
        for i in range(2 ** l):
            (a1, b1), (a2, b2) = _children(tree, l, i)
            p12, p21 = sibling_pairs(tree, l, i)
            n12 = nb.block(a1, b1, a2, b2) if nb is not None else None
            n21 = nb.block(a2, b2, a1, b1) if nb is not None else None
            jobs.append((entry_eval_generator(p12, eps, alpha, k_nn, n12, rmax, atol, dtype), a1, a2))
            jobs.append((entry_eval_generator(p21, eps, alpha, k_nn, n21, rmax, atol, dtype), a2, a1))
            keys.append((l, i))
    results = run_generators(jobs, oracle.extract)
    leaves = [np.asarray(b, dtype=dtype) for b in results[0]]
    offdiag = {key: (results[1 + 2 * k], results[2 + 2 * k]) for k, key in enumerate(keys)}
    return HodbfMatrix(tree, dtype, leaves, offdiag)


def hodbf_from_dense(M, tree: HierarchicalPartition, eps, **kw) -> HodbfMatrix:
    return hodbf_entry_eval(DenseOracle(M), tree, eps, **kw)


def hodbf_matvec(H: HodbfMatrix, X, transpose=False):
    X = np.asarray(X)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    if X.shape[0] != H.n:
        raise ValueError(f"dimension mismatch: HOD-BF is {H.n}x{H.n}, input has {X.shape[0]} rows")
    dtype = np.result_type(H.dtype, X.dtype)
    Y = np.zeros((H.n, X.shape[1]), dtype=dtype)
    for (a, b), D in zip(H.tree.leaves(), H.leaves):
        Y[a:b] = (D.T if transpose else D) @ X[a:b]
        add_flops("hodbf_apply", gemm_flops(b - a, b - a, X.shape[1]), dtype)
    for (l, i), (up, lo) in H.offdiag.items():
        (a1, b1), (a2, b2) = _children(H.tree, l, i)
        if transpose:
            Y[a2:b2] += bf_matvec(up, X[a1:b1], transpose=True)
            Y[a1:b1] += bf_matvec(lo, X[a2:b2], transpose=True)
        else:
            Y[a1:b1] += bf_matvec(up, X[a2:b2])
            Y[a2:b2] += bf_matvec(lo, X[a1:b1])
    return Y[:, 0] if vec else Y


def hodbf_to_dense(H: HodbfMatrix) -> np.ndarray:
    return hodbf_matvec(H, np.eye(H.n, dtype=H.dtype))


def hodbf_extract(H: HodbfMatrix, requests) -> list:
    """Dense sub-blocks, routed to leaf blocks and batched per butterfly."""
    T = H.tree
    Lh = T.levels
    n = H.n
    out = []
    routed: dict = {}
    for q, (rows, cols) in enumerate(requests):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n):
            raise IndexError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n):
            raise IndexError("column index out of range")
        blk = np.zeros((rows.size, cols.size), dtype=H.dtype)
        out.append(blk)
        if rows.size == 0 or cols.size == 0:
            continue
        lr = T.leaf_of(rows)
        lcn = T.leaf_of(cols)
        ucols = np.unique(lcn)
        for a in np.intersect1d(np.unique(lr), ucols):
            rsel = np.flatnonzero(lr == a)
            csel = np.flatnonzero(lcn == a)
            start = T.node(Lh, int(a))[0]
            blk[np.ix_(rsel, csel)] = H.leaves[a][np.ix_(rows[rsel] - start, cols[csel] - start)]
        for l in range(Lh):
            sh = Lh - l - 1
            rn = lr >> sh
            cn = lcn >> sh
            cset = np.unique(cn)
            for u in np.unique(rn):
                sib = u ^ 1
                if not np.any(cset == sib):
                    continue
                rsel = np.flatnonzero(rn == u)
                csel = np.flatnonzero(cn == sib)
                i = int(u) >> 1
                which = int(u) & 1
                (a1, _), (a2, _) = _children(T, l, i)
                r0, c0 = (a1, a2) if which == 0 else (a2, a1)
                routed.setdefault((l, i, which), []).append(
                    (q, rsel, csel, rows[rsel] - r0, cols[csel] - c0))
    for (l, i, which), items in routed.items():
        bf = H.offdiag[(l, i)][which]
        blocks = bf_extract(bf, [(r, c) for _, _, _, r, c in items])
        for (q, rsel, csel, _, _), b in zip(items, blocks):
            out[q][np.ix_(rsel, csel)] = b
    return out


class HodbfOracle(EntryOracle):
    def __init__(self, H: HodbfMatrix, neighbors=None):
        self.H = H
        self.shape = H.shape
        self.dtype = np.dtype(H.dtype)
        self.neighbors = neighbors

    def extract(self, requests):
        return hodbf_extract(self.H, requests)


def hodbf_max_rank(H: HodbfMatrix) -> int:
    return max((bf_max_rank(b) for b in H.butterflies()), default=0)


def hodbf_memory(H: HodbfMatrix) -> int:
    return int(sum(D.size for D in H.leaves) + sum(bf_memory(b) for b in H.butterflies()))


# --- identity-plus-butterfly inversion ---------------------------------------

def bf_split(A: ButterflyMatrix):
    """Exact split of an ``L >= 2`` butterfly into its four ``L - 2`` level quadrants.

    Returns ``[[A11, A12], [A21, A22]]`` indexed by (row half, column half).
    """
    L, lc = A.levels, A.center
    if L < 2:
        raise ValueError("splitting needs at least two levels")
    rt, ct = A.pair.rows, A.pair.cols
    Lc = L - 2
    out = [[None, None], [None, None]]
    for a in (0, 1):
        for b in (0, 1):
            pair = PartitionPair(rt.subtree(1, a).truncate(Lc), ct.subtree(1, b).truncate(Lc))
            nb = 2 ** Lc

            def parent(lp, ip, jp):
                l = lp + 1
                i = a * 2 ** lp + ip
                j = b * 2 ** (L - l - 1) + jp
                return l, i * 2 ** (L - l) + j

            U = []
            for ip in range(nb):
                l, idx = parent(Lc, ip, 0)
                i = idx // 2
                r = A.R[l][idx]
                r1 = A.U[2 * i].shape[1]
                U.append(np.vstack([A.U[2 * i] @ r[:r1], A.U[2 * i + 1] @ r[r1:]]))
            V = []
            for jp in range(nb):
                l, idx = parent(0, 0, jp)
                j = idx % (2 ** (L - 1))
                w = A.W[1][idx]
                c1 = A.V[2 * j].shape[1]
                V.append(np.vstack([A.V[2 * j] @ w[:c1], A.V[2 * j + 1] @ w[c1:]]))
            lcp = Lc // 2
            R = {}
            for lp in range(lcp, Lc):
                ncl = 2 ** (Lc - lp)
                R[lp] = [A.R[parent(lp, ip, jp)[0]][parent(lp, ip, jp)[1]]
                         for ip in range(2 ** lp) for jp in range(ncl)]
            W = {}
            for lp in range(1, lcp + 1):
                ncl = 2 ** (Lc - lp)
                W[lp] = [A.W[parent(lp, ip, jp)[0]][parent(lp, ip, jp)[1]]
                         for ip in range(2 ** lp) for jp in range(ncl)]
            ncl = 2 ** (Lc - lcp)
            assert parent(lcp, 0, 0)[0] == lc
            Bc = [A.B[parent(lcp, ip, jp)[1]] for ip in range(2 ** lcp) for jp in range(ncl)]
            out[a][b] = ButterflyMatrix(pair, A.dtype, U, R, Bc, W, V, {})
    return out


def _dense_smw(A: ButterflyMatrix, eps, path):
    Ad = bf_to_dense(A)
    n = Ad.shape[0]
    M = np.eye(n, dtype=Ad.dtype) + Ad
    lu, piv = lu_factor_quiet(M)
    if n and np.any(np.diag(lu) == 0):
        raise SingularBlockError(f"identity-plus-butterfly block is singular at {path or 'root'}")
    add_flops("hodbf_invert", 2 * n ** 3 // 3 + 2 * n ** 3, Ad.dtype)
    inv = sla.lu_solve((lu, piv), np.eye(n, dtype=Ad.dtype), check_finite=False)
    return bf_entry_eval(DenseOracle(inv - np.eye(n)), A.pair, eps, k_nn=0)


def bf_smw(A: ButterflyMatrix, eps, rng=None, path="") -> ButterflyMatrix:
    """Butterfly ``A'`` with ``(I + A)^{-1} = I + A'``.

    Recursive 2x2 block elimination on the quadrant butterflies; levels below
    two are handled densely.
    """
    if A.shape[0] != A.shape[1]:
        raise ValueError("bf_smw needs a square butterfly")
    if rng is None:
        rng = np.random.default_rng(0)
    if A.levels < 2:
        return _dense_smw(A, eps, path)
    (A11, A12), (A21, A22) = bf_split(A)
    A22p = bf_smw(A22, eps, rng, path + "/22")
    n1 = A11.shape[0]

    def m22inv(X, t=False):
        return X + bf_matvec(A22p, X, transpose=t)

    def schur(X):
        return bf_matvec(A11, X) - bf_matvec(A12, m22inv(bf_matvec(A21, X)))

    def schur_t(Y):
        return (bf_matvec(A11, Y, transpose=True)
                - bf_matvec(A21, m22inv(bf_matvec(A12, Y, transpose=True), True), transpose=True))

    Sm = bf_random_matvec(MatvecOracle(A11.shape, A.dtype, schur, schur_t), A11.pair, eps, rng)
    Sp = bf_smw(Sm, eps, rng, path + "/11")

    def inv_minus_i(X, t=False):
        x1, x2 = X[:n1], X[n1:]
        a12, a21 = (A21, A12) if t else (A12, A21)
        w2 = m22inv(x2, t)
        y1 = x1 - bf_matvec(a12, w2, transpose=t)
        y1 = y1 + bf_matvec(Sp, y1, transpose=t)
        y2 = w2 - m22inv(bf_matvec(a21, y1, transpose=t), t)
        return np.vstack([y1 - x1, y2 - x2])

    orc = MatvecOracle(A.shape, A.dtype, inv_minus_i, lambda Y: inv_minus_i(Y, True))
    return bf_random_matvec(orc, A.pair, eps, rng)


# --- HOD-BF inversion --------------------------------------------------------

@dataclass(eq=False)
class HodbfInverse:
    """Inverse in recursive product form.

    For node ``(l, i)`` with children ``1, 2``::

        A^{-1} = [I, 0; -B2, I] [S^{-1}, 0; 0, I] [I, -B1; 0, I] diag(A1^{-1}, A2^{-1})

    with ``B1 ~= A1^{-1} A12``, ``B2 ~= A2^{-1} A21``, ``S = I - B1 B2`` and
    ``S^{-1} = I + Sp``.  Leaves keep dense LU factors.
    """

    tree: HierarchicalPartition
    dtype: object
    leaf_lu: list
    nodes: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tree.n

    @property
    def shape(self):
        return (self.n, self.n)

    def apply(self, X, transpose=False):
        X = np.asarray(X)
        vec = X.ndim == 1
        if vec:
            X = X[:, None]
        if X.shape[0] != self.n:
            raise ValueError("dimension mismatch in HOD-BF inverse application")
        dtype = np.result_type(self.dtype, X.dtype)
        Y = self._apply(0, 0, X.astype(dtype, copy=False), transpose)
        return Y[:, 0] if vec else Y

    matvec = apply

    def rmatvec(self, Y):
        return self.apply(Y, transpose=True)

    def _apply(self, l, i, X, t):
        if l == self.tree.levels:
            lu = self.leaf_lu[i]
            add_flops("hodbf_apply", 2 * X.shape[0] ** 2 * X.shape[1], X.dtype)
            return sla.lu_solve(lu, X, trans=1 if t else 0, check_finite=False) if X.shape[0] else X
        n1 = self.tree.size(l + 1, 2 * i)
        B1, B2, Sp = self.nodes[(l, i)]
        if not t:
            z1 = self._apply(l + 1, 2 * i, X[:n1], t)
            z2 = self._apply(l + 1, 2 * i + 1, X[n1:], t)
            w1 = z1 - bf_matvec(B1, z2)
            w1 = w1 + bf_matvec(Sp, w1)
            y2 = z2 - bf_matvec(B2, w1)
            return np.vstack([w1, y2])
        u1 = X[:n1] - bf_matvec(B2, X[n1:], transpose=True)
        u1 = u1 + bf_matvec(Sp, u1, transpose=True)
        u2 = X[n1:] - bf_matvec(B1, u1, transpose=True)
        return np.vstack([self._apply(l + 1, 2 * i, u1, t), self._apply(l + 1, 2 * i + 1, u2, t)])

    def _subtree_solve(self, l, i, t=False):
        return lambda X: self._apply(l, i, X, t)

    def toarray(self):
        return self.apply(np.eye(self.n, dtype=self.dtype))

    def butterflies(self):
        for trio in self.nodes.values():
            yield from trio


def hodbf_inverse_memory(Hi: HodbfInverse) -> int:
    leaf = sum(lu[0].size for lu in Hi.leaf_lu)
    return int(leaf + sum(bf_memory(b) for b in Hi.butterflies()))


def hodbf_inverse_max_rank(Hi: HodbfInverse) -> int:
    return max((bf_max_rank(b) for b in Hi.butterflies()), default=0)


def hodbf_invert(H: HodbfMatrix, eps, rng=None) -> HodbfInverse:
    """Bottom-up inversion: leaf LU, then per node two randomized updates and one SMW."""
    if rng is None:
        rng = np.random.default_rng(0)
    T = H.tree
    dtype = np.dtype(H.dtype)
    leaf_lu = []
    for k, D in enumerate(H.leaves):
        if D.shape[0] == 0:
            leaf_lu.append((D.copy(), np.zeros(0, dtype=np.int32)))
            continue
        lu, piv = lu_factor_quiet(D)
        if np.any(np.diag(lu) == 0):
            raise SingularBlockError(f"HOD-BF leaf {k} is singular")
        add_flops("hodbf_invert", 2 * D.shape[0] ** 3 // 3, dtype)
        leaf_lu.append((lu, piv))
    inv = HodbfInverse(T, dtype, leaf_lu, {})
    for l in range(T.levels - 1, -1, -1):
        for i in range(2 ** l):
            up, lo = H.offdiag[(l, i)]
            solve1 = inv._subtree_solve(l + 1, 2 * i)
            solve1t = inv._subtree_solve(l + 1, 2 * i, True)
            solve2 = inv._subtree_solve(l + 1, 2 * i + 1)
            solve2t = inv._subtree_solve(l + 1, 2 * i + 1, True)
            o1 = MatvecOracle(up.shape, dtype, lambda X, up=up, s=solve1: s(bf_matvec(up, X)),
                              lambda Y, up=up, s=solve1t: bf_matvec(up, s(Y), transpose=True))
            o2 = MatvecOracle(lo.shape, dtype, lambda X, lo=lo, s=solve2: s(bf_matvec(lo, X)),
                              lambda Y, lo=lo, s=solve2t: bf_matvec(lo, s(Y), transpose=True))
            B1 = bf_random_matvec(o1, up.pair, eps, rng)
            B2 = bf_random_matvec(o2, lo.pair, eps, rng)
            pair11 = PartitionPair(T.subtree(l + 1, 2 * i), T.subtree(l + 1, 2 * i))
            n1 = pair11.shape[0]
            sm = MatvecOracle((n1, n1), dtype,
                              lambda X, B1=B1, B2=B2: -bf_matvec(B1, bf_matvec(B2, X)),
                              lambda Y, B1=B1, B2=B2: -bf_matvec(B2, bf_matvec(B1, Y, transpose=True),
                                                                 transpose=True))
            Sm = bf_random_matvec(sm, pair11, eps, rng)
            Sp = bf_smw(Sm, eps, rng, path=f"node({l},{i})")
            inv.nodes[(l, i)] = (B1, B2, Sp)
    return inv
