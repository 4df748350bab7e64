"""Butterfly matrices in hybrid (center-level) form.

A butterfly over a :class:`PartitionPair` with ``L`` levels stores

    K ~= (U^L R^{L-1} ... R^{lc}) B^{lc} (W^{lc} ... W^1 V^0)^T,   lc = L // 2.

Block ``(i, j)`` at level ``l`` pairs row cluster ``i`` at depth ``l`` of the
row tree with column cluster ``j`` at depth ``L - l`` of the column tree; per
level the blocks are stored flat at ``i * 2**(L - l) + j``.  Row-side factors
exist for ``lc <= l <= L`` and column-side factors for ``0 <= l <= lc``.
All indices are positions ``0..m-1`` / ``0..n-1`` of the two trees.
Transposes are plain (never conjugated).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csgraph

from .counters import add_flops, gemm_flops
from .interpolative import IdFactor, col_id, row_id
from .ordering import HierarchicalPartition, balanced_partition, tree_depth

DEFAULT_LEAF = 16
DEFAULT_ALPHA = 2.0
DEFAULT_KNN = 16
SATURATION_RETRIES = 3


# --- trees and oracles -------------------------------------------------------

class PartitionPair:
    """Row and column trees with a common level count (the deeper one is truncated)."""

    def __init__(self, rows: HierarchicalPartition, cols: HierarchicalPartition):
        levels = min(rows.levels, cols.levels)
        self.rows = rows if rows.levels == levels else rows.truncate(levels)
        self.cols = cols if cols.levels == levels else cols.truncate(levels)

    @classmethod
    def balanced(cls, m, n, leaf_size=DEFAULT_LEAF) -> "PartitionPair":
        levels = min(tree_depth(m, leaf_size), tree_depth(n, leaf_size))
        return cls(balanced_partition(m, levels=levels), balanced_partition(n, levels=levels))

    @property
    def levels(self) -> int:
        return self.rows.levels

    @property
    def center(self) -> int:
        return self.levels // 2

    @property
    def shape(self):
        return (self.rows.n, self.cols.n)

    def transpose(self) -> "PartitionPair":
        return PartitionPair(self.cols, self.rows)


class NeighborLists:
    """Graph (BFS) distances between row and column positions of one block.

    ``cols_near(rows, lo, hi)`` returns, for every row, its ``k_nn`` nearest
    columns in ``[lo, hi)`` (ties by ascending position), merged into one set.
    """

    def __init__(self, dist, k_nn=DEFAULT_KNN, _view=None):
        if _view is not None:
            self._base, self._r0, self._c0, self.m, self.n = _view
            self.k_nn = k_nn
            return
        dist = np.asarray(dist, dtype=np.float64)
        m, n = dist.shape
        reach = np.isfinite(dist)
        big = int(dist[reach].max()) + 1 if reach.any() else 1
        d = np.where(reach, dist, big).astype(np.int64)
        rkey = d * max(n, 1) + np.arange(n)[None, :]
        ckey = (d * max(m, 1) + np.arange(m)[:, None]).T.copy()
        self._base = (rkey, ckey, reach)
        self._r0 = self._c0 = 0
        self.m, self.n = m, n
        self.k_nn = k_nn

    @classmethod
    def from_graph(cls, adj, row_nodes, col_nodes, k_nn=DEFAULT_KNN) -> "NeighborLists":
        """Distances on graph ``adj`` from ``row_nodes`` to ``col_nodes``."""
        row_nodes = np.asarray(row_nodes, dtype=np.int64)
        col_nodes = np.asarray(col_nodes, dtype=np.int64)
        if len(row_nodes) == 0 or len(col_nodes) == 0:
            return cls(np.zeros((len(row_nodes), len(col_nodes))), k_nn)
        d = csgraph.shortest_path(adj, unweighted=True, directed=False, indices=row_nodes)
        return cls(np.atleast_2d(d)[:, col_nodes], k_nn)

    def block(self, r0, r1, c0, c1) -> "NeighborLists":
        return NeighborLists(None, self.k_nn,
                             _view=(self._base, self._r0 + r0, self._c0 + c0, r1 - r0, c1 - c0))

    def transpose(self) -> "NeighborLists":
        rkey, ckey, reach = self._base
        out = NeighborLists(None, self.k_nn, _view=((ckey, rkey, reach.T), self._c0, self._r0,
                                                    self.n, self.m))
        return out

    def cols_near(self, rows, lo, hi) -> np.ndarray:
        rkey, _, reach = self._base
        return self._near(rkey, reach, self._r0, self._c0, rows, lo, hi)

    def rows_near(self, cols, lo, hi) -> np.ndarray:
        _, ckey, reach = self._base
        return self._near(ckey, reach.T, self._c0, self._r0, cols, lo, hi)

    def _near(self, key, reach, a0, b0, anchors, lo, hi):
        anchors = np.asarray(anchors, dtype=np.int64) + a0
        k = self.k_nn
        if len(anchors) == 0 or hi <= lo or k <= 0:
            return np.zeros(0, dtype=np.int64)
        sub = key[anchors, b0 + lo:b0 + hi]
        if hi - lo > k:
            sel = np.argpartition(sub, k - 1, axis=1)[:, :k]
        else:
            sel = np.broadcast_to(np.arange(hi - lo), sub.shape)
        ok = reach[anchors[:, None], b0 + lo + sel]
        return np.unique(sel[ok]) + lo


class EntryOracle:
    """Base class: ``extract(requests)`` returns ``K[rows][:, cols]`` for each pair."""

    shape: tuple
    dtype = np.dtype(np.float64)
    neighbors: NeighborLists | None = None

    def extract(self, requests):
        raise NotImplementedError


class DenseOracle(EntryOracle):
    def __init__(self, M, neighbors=None):
        self.M = np.asarray(M)
        self.shape = self.M.shape
        self.dtype = np.result_type(self.M.dtype, np.float64)
        self.neighbors = neighbors

    def extract(self, requests):
        return [self.M[np.ix_(r, c)] for r, c in requests]


class FunctionOracle(EntryOracle):
    """Entries from a vectorized kernel ``fn(row_grid, col_grid)``."""

    def __init__(self, fn, shape, dtype=np.float64, neighbors=None):
        self.fn = fn
        self.shape = tuple(shape)
        self.dtype = np.dtype(dtype)
        self.neighbors = neighbors

    def extract(self, requests):
        out = []
        for r, c in requests:
            r = np.asarray(r, dtype=np.int64)
            c = np.asarray(c, dtype=np.int64)
            if r.size == 0 or c.size == 0:
                out.append(np.zeros((r.size, c.size), dtype=self.dtype))
            else:
                out.append(np.asarray(self.fn(r[:, None], c[None, :]), dtype=self.dtype))
        return out


class CountingOracle(EntryOracle):
    """Wraps an oracle and counts batched ``extract`` invocations."""

    def __init__(self, inner: EntryOracle):
        self.inner = inner
        self.shape = inner.shape
        self.dtype = inner.dtype
        self.neighbors = inner.neighbors
        self.calls = 0

    def extract(self, requests):
        self.calls += 1
        return self.inner.extract(requests)


@dataclass
class MatvecOracle:
    """``matvec(X) = K @ X`` and ``rmatvec(Y) = K.T @ Y`` on dense blocks."""

    shape: tuple
    dtype: object
    matvec: object
    rmatvec: object

    @classmethod
    def from_dense(cls, M) -> "MatvecOracle":
        M = np.asarray(M)
        return cls(M.shape, np.result_type(M.dtype, np.float64), lambda X: M @ X, lambda Y: M.T @ Y)


# --- the butterfly container -------------------------------------------------

@dataclass(eq=False)
class ButterflyMatrix:
    """Hybrid butterfly factors; see the module docstring for the layout."""

    pair: PartitionPair
    dtype: object
    U: list
    R: dict
    B: list
    W: dict
    V: list
    stats: dict = field(default_factory=dict)

    @property
    def levels(self) -> int:
        return self.pair.levels

    @property
    def center(self) -> int:
        return self.pair.center

    @property
    def shape(self):
        return self.pair.shape

    def row_rank(self, level, idx) -> int:
        f = self.U[idx] if level == self.levels else self.R[level][idx]
        return f.shape[1]

    def col_rank(self, level, idx) -> int:
        f = self.V[idx] if level == 0 else self.W[level][idx]
        return f.shape[1]

    def factors(self):
        """All factor arrays (for storage counts)."""
        out = list(self.U) + list(self.B) + list(self.V)
        for lst in self.R.values():
            out += lst
        for lst in self.W.values():
            out += lst
        return out

    def factor_count(self) -> int:
        """Number of factors in the product string (``L + 3``)."""
        return 1 + len(self.R) + 1 + len(self.W) + 1

    def matvec(self, X):
        return bf_matvec(self, X)

    def rmatvec(self, Y):
        return bf_matvec(self, Y, transpose=True)

    def toarray(self):
        return bf_to_dense(self)


def zero_butterfly(pair: PartitionPair, dtype=np.float64) -> ButterflyMatrix:
    L, lc = pair.levels, pair.center
    nb = 2 ** L
    dtype = np.dtype(dtype)
    U = [np.zeros((pair.rows.size(L, i), 0), dtype) for i in range(nb)]
    V = [np.zeros((pair.cols.size(L, j), 0), dtype) for j in range(nb)]
    R = {l: [np.zeros((0, 0), dtype)] * nb for l in range(lc, L)}
    W = {l: [np.zeros((0, 0), dtype)] * nb for l in range(1, lc + 1)}
    B = [np.zeros((0, 0), dtype)] * nb
    return ButterflyMatrix(pair, dtype, U, R, B, W, V, {})


# --- construction by entry evaluation ---------------------------------------

def _uniform(lo, hi, count):
    size = hi - lo
    if count >= size:
        return np.arange(lo, hi)
    return lo + ((np.arange(count) + 0.5) * (size / count)).astype(np.int64)


def _proxies(anchor, lo, hi, alpha, k_nn, near):
    """Uniform stride samples in ``[lo, hi)`` plus graph neighbours of ``anchor``."""
    size = hi - lo
    na = len(anchor)
    if near is None:
        count = int(np.ceil(2 * alpha * na))
        budget = count
    else:
        count = int(np.ceil(alpha * na))
        budget = count + k_nn * na
    if budget >= size:
        return np.arange(lo, hi), True
    picks = _uniform(lo, hi, count)
    if near is not None:
        picks = np.union1d(picks, near(anchor, lo, hi))
    return picks, len(picks) == size


def _id_round(anchors, ranges, kind, eps, alpha, k_nn, near, rmax, atol):
    """Generator: IDs of ``K(anchor, proxies)`` (row) or ``K(proxies, anchor)`` (col)."""
    nblk = len(anchors)
    factors: list = [None] * nblk
    mult = np.ones(nblk)
    pending = list(range(nblk))
    for attempt in range(SATURATION_RETRIES + 1):
        reqs, meta = [], []
        for b in pending:
            anchor = anchors[b]
            lo, hi = ranges[b]
            if len(anchor) == 0 or hi <= lo:
                factors[b] = IdFactor(np.zeros((len(anchor), 0)), np.zeros(0, dtype=np.int64))
                continue
            prox, complete = _proxies(anchor, lo, hi, alpha * mult[b], k_nn, near)
            reqs.append((anchor, prox) if kind == "row" else (prox, anchor))
            meta.append((b, len(prox), complete))
        if not reqs:
            break
        blocks = yield reqs
        retry = []
        for (b, npx, complete), blk in zip(meta, blocks):
            if kind == "row":
                f = row_id(blk, eps, rmax, atol)
            else:
                f = col_id(blk, eps, rmax, atol)
            add_flops("id", 4 * blk.shape[0] * blk.shape[1] * max(f.rank, 1), blk.dtype)
            factors[b] = f
            saturated = f.rank >= npx and f.rank < len(anchors[b])
            if saturated and not complete and attempt < SATURATION_RETRIES:
                mult[b] *= 2
                retry.append(b)
        pending = retry
        if not pending:
            break
    return factors


def entry_eval_generator(pair: PartitionPair, eps, alpha=DEFAULT_ALPHA, k_nn=DEFAULT_KNN,
                         neighbors: NeighborLists | None = None, rmax=None, atol=0.0,
                         dtype=np.float64):
    """Coroutine form of :func:`bf_entry_eval`.

    Yields lists of ``(rows, cols)`` requests and expects the matching dense
    blocks to be sent back; returns the :class:`ButterflyMatrix`.  Without rank
    saturation it yields exactly ``L + 2`` times.
    """
    L, lc = pair.levels, pair.center
    rt, ct = pair.rows, pair.cols
    nb = 2 ** L
    dtype = np.dtype(dtype)
    use_nn = neighbors is not None and k_nn > 0
    row_near = neighbors.cols_near if use_nn else None
    col_near = neighbors.rows_near if use_nn else None

    U: list = [None] * nb
    R = {l: [None] * nb for l in range(lc, L)}
    Ob = {}
    # rows: leaves inward to the center
    for l in range(L, lc - 1, -1):
        ncl = 2 ** (L - l)
        anchors, ranges = [], []
        for i in range(2 ** l):
            for j in range(ncl):
                if l == L:
                    a, b = rt.node(L, i)
                    anchors.append(np.arange(a, b))
                else:
                    ncp = ncl // 2
                    anchors.append(np.concatenate([Ob[l + 1][2 * i * ncp + j // 2],
                                                   Ob[l + 1][(2 * i + 1) * ncp + j // 2]]))
                ranges.append(ct.node(L - l, j))
        facs = yield from _id_round(anchors, ranges, "row", eps, alpha, k_nn, row_near, rmax, atol)
        Ob[l] = [anchors[b][f.skeleton] for b, f in enumerate(facs)]
        for b, f in enumerate(facs):
            interp = f.interp.astype(dtype, copy=False)
            if l == L:
                U[b] = interp
            else:
                R[l][b] = interp

    V: list = [None] * nb
    W = {l: [None] * nb for l in range(1, lc + 1)}
    Sb = {}

    def col_anchor(l, i, j):
        if l == 0:
            a, b = ct.node(L, j)
            return np.arange(a, b)
        ncl = 2 ** (L - l)
        base = (i // 2) * (2 * ncl)
        return np.concatenate([Sb[l - 1][base + 2 * j], Sb[l - 1][base + 2 * j + 1]])

    def store_col(l, b, f):
        interp = f.interp.astype(dtype, copy=False)
        if l == 0:
            V[b] = interp
        else:
            W[l][b] = interp

    # columns: leaves inward, stopping one level short of the center
    for l in range(0, lc):
        ncl = 2 ** (L - l)
        anchors, ranges = [], []
        for i in range(2 ** l):
            for j in range(ncl):
                anchors.append(col_anchor(l, i, j))
                ranges.append(rt.node(l, i))
        facs = yield from _id_round(anchors, ranges, "col", eps, alpha, k_nn, col_near, rmax, atol)
        Sb[l] = [anchors[b][f.skeleton] for b, f in enumerate(facs)]
        for b, f in enumerate(facs):
            store_col(l, b, f)

    # center: the skeleton rows double as proxy rows, so one extraction gives
    # both the last column ID and the skeleton matrices
    ncl = 2 ** (L - lc)
    anchors = [col_anchor(lc, i, j) for i in range(2 ** lc) for j in range(ncl)]
    reqs = [(Ob[lc][b], anchors[b]) for b in range(nb)]
    live = [b for b in range(nb) if len(reqs[b][0]) and len(reqs[b][1])]
    blocks = (yield [reqs[b] for b in live]) if live else []
    got = dict(zip(live, blocks))
    B: list = [None] * nb
    for b in range(nb):
        if b in got:
            blk = got[b]
            f = col_id(blk, eps, rmax, atol)
            add_flops("id", 4 * blk.shape[0] * blk.shape[1] * max(f.rank, 1), blk.dtype)
            B[b] = blk[:, f.skeleton].astype(dtype, copy=False)
        else:
            f = IdFactor(np.zeros((len(anchors[b]), 0)), np.zeros(0, dtype=np.int64))
            B[b] = np.zeros((len(reqs[b][0]), 0), dtype)
        store_col(lc, b, f)
    return ButterflyMatrix(pair, dtype, U, R, B, W, V, {})


def run_generators(jobs, extract):
    """Advance coroutines in lock-step, one merged ``extract`` call per round.

    ``jobs`` holds ``(generator, row_offset, col_offset)``; request positions
    are shifted by the offsets before extraction.  Returns the generators'
    return values.
    """
    results = [None] * len(jobs)
    live = []
    for k, (gen, r0, c0) in enumerate(jobs):
        try:
            live.append((k, gen, r0, c0, next(gen)))
        except StopIteration as stop:
            results[k] = stop.value
    rounds = 0
    while live:
        merged = [(np.asarray(r) + r0, np.asarray(c) + c0)
                  for _, _, r0, c0, req in live for r, c in req]
        blocks = extract(merged) if merged else []
        rounds += 1
        pos = 0
        nxt = []
        for k, gen, r0, c0, req in live:
            mine = blocks[pos:pos + len(req)]
            pos += len(req)
            try:
                nxt.append((k, gen, r0, c0, gen.send(mine)))
            except StopIteration as stop:
                results[k] = stop.value
        live = nxt
    return results


def bf_entry_eval(oracle: EntryOracle, pair: PartitionPair, eps, alpha=DEFAULT_ALPHA,
                  k_nn=DEFAULT_KNN, rmax=None, atol=0.0) -> ButterflyMatrix:
    """Butterfly of ``oracle`` from proxy-sampled entry extraction.

    Uses ``oracle.neighbors`` for nearest-neighbour proxies when present.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if tuple(oracle.shape) != pair.shape:
        raise ValueError(f"oracle shape {oracle.shape} does not match trees {pair.shape}")
    gen = entry_eval_generator(pair, eps, alpha, k_nn, oracle.neighbors, rmax, atol, oracle.dtype)
    (bf,) = run_generators([(gen, 0, 0)], oracle.extract)
    return bf


# --- application ---------------------------------------------------------------

def _col_sweep(bf: ButterflyMatrix, X):
    """Coefficients ``F_{i,j}^T X(S_j)`` for every center block."""
    L, lc = bf.levels, bf.center
    ct = bf.pair.cols
    nb = 2 ** L
    t = []
    for j in range(nb):
        a, b = ct.node(L, j)
        t.append(bf.V[j].T @ X[a:b])
        add_flops("bf_apply", gemm_flops(*bf.V[j].shape, X.shape[1]), bf.dtype)
    for l in range(1, lc + 1):
        ncl = 2 ** (L - l)
        new = [None] * nb
        for i in range(2 ** l):
            base = (i // 2) * (2 * ncl)
            for j in range(ncl):
                w = bf.W[l][i * ncl + j]
                stacked = np.concatenate([t[base + 2 * j], t[base + 2 * j + 1]], axis=0)
                new[i * ncl + j] = w.T @ stacked
                add_flops("bf_apply", gemm_flops(*w.shape, X.shape[1]), bf.dtype)
        t = new
    return t


def _row_sweep_out(bf: ButterflyMatrix, s, k, dtype):
    """Push center coefficients ``s`` out through ``R`` and ``U``."""
    L, lc = bf.levels, bf.center
    rt = bf.pair.rows
    nb = 2 ** L
    for l in range(lc, L):
        ncl = 2 ** (L - l)
        ncp = ncl // 2
        new = [None] * nb
        for i in range(2 ** l):
            for j in range(ncl):
                c1 = 2 * i * ncp + j // 2
                c2 = (2 * i + 1) * ncp + j // 2
                if new[c1] is None:
                    new[c1] = np.zeros((bf.row_rank(l + 1, c1), k), dtype)
                if new[c2] is None:
                    new[c2] = np.zeros((bf.row_rank(l + 1, c2), k), dtype)
                r = bf.R[l][i * ncl + j]
                u = r @ s[i * ncl + j]
                add_flops("bf_apply", gemm_flops(*r.shape, k), dtype)
                r1 = new[c1].shape[0]
                new[c1] += u[:r1]
                new[c2] += u[r1:]
        s = new
    Y = np.zeros((rt.n, k), dtype)
    for i in range(nb):
        a, b = rt.node(L, i)
        Y[a:b] = bf.U[i] @ s[i]
        add_flops("bf_apply", gemm_flops(*bf.U[i].shape, k), dtype)
    return Y


def _row_sweep_in(bf: ButterflyMatrix, Y):
    """Coefficients ``E_{i,j}^T Y(O_i)`` for every center block."""
    L, lc = bf.levels, bf.center
    rt = bf.pair.rows
    nb = 2 ** L
    t = []
    for i in range(nb):
        a, b = rt.node(L, i)
        t.append(bf.U[i].T @ Y[a:b])
        add_flops("bf_apply", gemm_flops(*bf.U[i].shape, Y.shape[1]), bf.dtype)
    for l in range(L - 1, lc - 1, -1):
        ncl = 2 ** (L - l)
        ncp = ncl // 2
        new = [None] * nb
        for i in range(2 ** l):
            for j in range(ncl):
                r = bf.R[l][i * ncl + j]
                stacked = np.concatenate([t[2 * i * ncp + j // 2], t[(2 * i + 1) * ncp + j // 2]])
                new[i * ncl + j] = r.T @ stacked
                add_flops("bf_apply", gemm_flops(*r.shape, Y.shape[1]), bf.dtype)
        t = new
    return t


def _col_sweep_out(bf: ButterflyMatrix, s, k, dtype):
    L, lc = bf.levels, bf.center
    ct = bf.pair.cols
    nb = 2 ** L
    for l in range(lc, 0, -1):
        ncl = 2 ** (L - l)
        new = [None] * nb
        for i in range(2 ** l):
            base = (i // 2) * (2 * ncl)
            for j in range(ncl):
                c1, c2 = base + 2 * j, base + 2 * j + 1
                if new[c1] is None:
                    new[c1] = np.zeros((bf.col_rank(l - 1, c1), k), dtype)
                if new[c2] is None:
                    new[c2] = np.zeros((bf.col_rank(l - 1, c2), k), dtype)
                w = bf.W[l][i * ncl + j]
                u = w @ s[i * ncl + j]
                add_flops("bf_apply", gemm_flops(*w.shape, k), dtype)
                r1 = new[c1].shape[0]
                new[c1] += u[:r1]
                new[c2] += u[r1:]
        s = new
    X = np.zeros((ct.n, k), dtype)
    for j in range(nb):
        a, b = ct.node(L, j)
        X[a:b] = bf.V[j] @ s[j]
        add_flops("bf_apply", gemm_flops(*bf.V[j].shape, k), dtype)
    return X


def bf_matvec(bf: ButterflyMatrix, X, transpose=False):
    """``K @ X`` (or ``K.T @ X``) applied factor by factor."""
    X = np.asarray(X)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    m, n = bf.shape
    if X.shape[0] != (m if transpose else n):
        raise ValueError(f"dimension mismatch: butterfly is {m}x{n}, input has {X.shape[0]} rows")
    dtype = np.result_type(bf.dtype, X.dtype)
    k = X.shape[1]
    if not transpose:
        t = _col_sweep(bf, X)
        s = []
        for b, tb in zip(bf.B, t):
            s.append(b @ tb)
            add_flops("bf_apply", gemm_flops(*b.shape, k), dtype)
        out = _row_sweep_out(bf, s, k, dtype)
    else:
        t = _row_sweep_in(bf, X)
        s = []
        for b, tb in zip(bf.B, t):
            s.append(b.T @ tb)
            add_flops("bf_apply", gemm_flops(*b.shape, k), dtype)
        out = _col_sweep_out(bf, s, k, dtype)
    return out[:, 0] if vec else out


def bf_to_dense(bf: ButterflyMatrix) -> np.ndarray:
    m, n = bf.shape
    return bf_matvec(bf, np.eye(n, dtype=bf.dtype))


# --- extraction --------------------------------------------------------------

def _chain_rows(bf: ButterflyMatrix, need_c: dict):
    """``E`` restricted to the needed rows for each center block.

    ``need_c`` maps center block index to sorted row positions.  Returns a dict
    of (rows, E-rows) per center block.
    """
    L, lc = bf.levels, bf.center
    rt = bf.pair.rows
    need = {lc: need_c}
    for l in range(lc + 1, L + 1):
        ncl = 2 ** (L - l)
        cur = {}
        for pidx, rows in need[l - 1].items():
            pi, pj = divmod(pidx, 2 * ncl)
            j = pj // 2
            for i in (2 * pi, 2 * pi + 1):
                a, b = rt.node(l, i)
                sel = rows[(rows >= a) & (rows < b)]
                if sel.size:
                    key = i * ncl + j
                    cur[key] = np.union1d(cur[key], sel) if key in cur else sel
        need[l] = cur
    E = {}
    for i, rows in need[L].items():
        a, _ = rt.node(L, i)
        E[(L, i)] = bf.U[i][rows - a]
    for l in range(L - 1, lc - 1, -1):
        ncl = 2 ** (L - l)
        ncp = ncl // 2
        for idx, rows in need[l].items():
            i, j = divmod(idx, ncl)
            r = bf.R[l][idx]
            c1, c2 = 2 * i * ncp + j // 2, (2 * i + 1) * ncp + j // 2
            r1 = bf.row_rank(l + 1, c1)
            out = np.empty((len(rows), r.shape[1]), dtype=bf.dtype)
            mid = rt.node(l + 1, 2 * i)[1]
            lo_mask = rows < mid
            for mask, child, part in ((lo_mask, c1, r[:r1]), (~lo_mask, c2, r[r1:])):
                if not mask.any():
                    continue
                crow = need[l + 1][child]
                pos = np.searchsorted(crow, rows[mask])
                out[mask] = E[(l + 1, child)][pos] @ part
                add_flops("extract", gemm_flops(mask.sum(), *part.shape), bf.dtype)
            E[(l, idx)] = out
    return {idx: (need[lc][idx], E[(lc, idx)]) for idx in need[lc]}


def _chain_cols(bf: ButterflyMatrix, need_c: dict):
    """``F`` restricted to the needed columns for each center block."""
    L, lc = bf.levels, bf.center
    ct = bf.pair.cols
    need = {lc: need_c}
    for l in range(lc - 1, -1, -1):
        ncl = 2 ** (L - l)
        cur = {}
        for pidx, cols in need[l + 1].items():
            pi, pj = divmod(pidx, ncl // 2)
            i = pi // 2
            for j in (2 * pj, 2 * pj + 1):
                a, b = ct.node(L - l, j)
                sel = cols[(cols >= a) & (cols < b)]
                if sel.size:
                    key = i * ncl + j
                    cur[key] = np.union1d(cur[key], sel) if key in cur else sel
        need[l] = cur
    F = {}
    for idx, cols in need[0].items():
        a, _ = ct.node(L, idx)
        F[(0, idx)] = bf.V[idx][cols - a]
    for l in range(1, lc + 1):
        ncl = 2 ** (L - l)
        for idx, cols in need[l].items():
            i, j = divmod(idx, ncl)
            w = bf.W[l][idx]
            base = (i // 2) * (2 * ncl)
            c1, c2 = base + 2 * j, base + 2 * j + 1
            r1 = bf.col_rank(l - 1, c1)
            out = np.empty((len(cols), w.shape[1]), dtype=bf.dtype)
            mid = ct.node(L - l + 1, 2 * j)[1]
            lo_mask = cols < mid
            for mask, child, part in ((lo_mask, c1, w[:r1]), (~lo_mask, c2, w[r1:])):
                if not mask.any():
                    continue
                ccol = need[l - 1][child]
                pos = np.searchsorted(ccol, cols[mask])
                out[mask] = F[(l - 1, child)][pos] @ part
                add_flops("extract", gemm_flops(mask.sum(), *part.shape), bf.dtype)
            F[(l, idx)] = out
    return {idx: (need[lc][idx], F[(lc, idx)]) for idx in need[lc]}


def bf_extract(bf: ButterflyMatrix, requests) -> list:
    """Dense ``K[rows][:, cols]`` for each request, each factor block touched once."""
    L, lc = bf.levels, bf.center
    rt, ct = bf.pair.rows, bf.pair.cols
    m, n = bf.shape
    ncl = 2 ** (L - lc)
    parsed = []
    need_r: dict = {}
    need_c: dict = {}
    for rows, cols in requests:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= m):
            raise IndexError("row position out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n):
            raise IndexError("column position out of range")
        ti = rt.leaf_of(rows, lc)
        nj = ct.leaf_of(cols, L - lc)
        tiles = []
        if rows.size and cols.size:
            for i in np.unique(ti):
                rsel = np.flatnonzero(ti == i)
                for j in np.unique(nj):
                    csel = np.flatnonzero(nj == j)
                    idx = int(i) * ncl + int(j)
                    tiles.append((idx, rsel, csel))
                    need_r.setdefault(idx, []).append(rows[rsel])
                    need_c.setdefault(idx, []).append(cols[csel])
        parsed.append((rows, cols, tiles))
    need_r = {k: np.unique(np.concatenate(v)) for k, v in need_r.items()}
    need_c = {k: np.unique(np.concatenate(v)) for k, v in need_c.items()}
    Er = _chain_rows(bf, need_r) if need_r else {}
    Fc = _chain_cols(bf, need_c) if need_c else {}
    G = {}
    for idx, (rows, E) in Er.items():
        G[idx] = E @ bf.B[idx]
        add_flops("extract", gemm_flops(E.shape[0], *bf.B[idx].shape), bf.dtype)
    out = []
    for rows, cols, tiles in parsed:
        blk = np.zeros((rows.size, cols.size), dtype=bf.dtype)
        for idx, rsel, csel in tiles:
            grow, g = need_r[idx], G[idx]
            gcol, f = Fc[idx]
            pr = np.searchsorted(grow, rows[rsel])
            pc = np.searchsorted(gcol, cols[csel])
            blk[np.ix_(rsel, csel)] = g[pr] @ f[pc].T
            add_flops("extract", gemm_flops(len(pr), g.shape[1], len(pc)), bf.dtype)
        out.append(blk)
    return out


class ButterflyOracle(EntryOracle):
    """Entry oracle reading a (sub)block of an existing butterfly."""

    def __init__(self, bf: ButterflyMatrix, r0=0, c0=0, shape=None, neighbors=None):
        self.bf = bf
        self.r0, self.c0 = r0, c0
        self.shape = tuple(shape) if shape is not None else bf.shape
        self.dtype = np.dtype(bf.dtype)
        self.neighbors = neighbors

    def extract(self, requests):
        return bf_extract(self.bf, [(np.asarray(r) + self.r0, np.asarray(c) + self.c0)
                                    for r, c in requests])


# --- randomized construction from products ----------------------------------

def _sketch_cols(rng, n, supports, k_wanted, dtype):
    """Block-diagonal random test matrix; identity blocks where ``k >= support``.

    Returns the dense ``n x sum(k)`` matrix and per-support column slices.
    """
    total = sum(min(k, b - a) for (a, b), k in zip(supports, k_wanted))
    X = np.zeros((n, total), dtype=dtype)
    slices = []
    c = 0
    for (a, b), k in zip(supports, k_wanted):
        size = b - a
        kk = min(k, size)
        if kk == size:
            X[a:b, c:c + kk] = np.eye(size)
        else:
            X[a:b, c:c + kk] = rng.standard_normal((size, kk))
        slices.append(slice(c, c + kk))
        c += kk
    return X, slices


def _full_extent(tree: HierarchicalPartition, level):
    return [tree.node(level, j) for j in range(2 ** level)]


def bf_random_matvec(oracle: MatvecOracle, pair: PartitionPair, eps, rng=None, k0=24,
                     oversample=8, rmax=None, dense_fallback=False, atol=0.0) -> ButterflyMatrix:
    """Butterfly from products with random block-supported test matrices.

    Row-side interpolation at level ``l`` uses sketches ``K(:, S_j) X_j`` for
    every column cluster ``j`` at depth ``L - l`` (one batched product per
    level); the column side mirrors this with ``K.T``.  Center skeletons are
    solved from the level-``lc`` sketches.  Sketch widths double per cluster
    until the detected rank leaves ``oversample`` spare columns or the sketch
    covers the whole cluster (then it is exact).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    m, n = pair.shape
    if tuple(oracle.shape) != (m, n):
        raise ValueError("oracle shape does not match trees")
    dtype = np.dtype(oracle.dtype)
    if dense_fallback:
        dense = oracle.matvec(np.eye(n, dtype=dtype))
        bf = bf_entry_eval(DenseOracle(dense), pair, eps, k_nn=0, rmax=rmax, atol=atol)
        bf.stats["matvec_columns"] = n
        return bf

    L, lc = pair.levels, pair.center
    rt, ct = pair.rows, pair.cols
    nb = 2 ** L
    columns_used = 0

    def sketch_level(apply, width, supports, anchors_for):
        """Adaptive sketching for one level; returns factors, and per-support (X, Y)."""
        nonlocal columns_used
        nsup = len(supports)
        kw = [k0] * nsup
        todo = list(range(nsup))
        XY: list = [None] * nsup
        facs: dict = {}
        while todo:
            sups = [supports[s] for s in todo]
            X, slices = _sketch_cols(rng, width, sups, [kw[s] for s in todo], dtype)
            if X.shape[1] == 0:
                for s in todo:
                    XY[s] = (np.zeros((supports[s][1] - supports[s][0], 0), dtype),
                             None, slice(0, 0))
                Y = None
            else:
                Y = apply(X)
                columns_used += X.shape[1]
            again = []
            for s, sl in zip(todo, slices):
                a, b = supports[s]
                XY[s] = (X[a:b, sl], Y, sl)
                grow = False
                for blk, anchor in anchors_for(s):
                    sk = Y[anchor, sl] if Y is not None else np.zeros((len(anchor), 0), dtype)
                    f = row_id(sk, eps, rmax, atol)
                    add_flops("id", 4 * sk.shape[0] * sk.shape[1] * max(f.rank, 1), dtype)
                    facs[blk] = f
                    kk = sl.stop - sl.start
                    if kk < b - a and f.rank > kk - oversample:
                        grow = True
                if grow:
                    kw[s] *= 2
                    again.append(s)
            todo = again
        return facs, XY

    # row side
    U: list = [None] * nb
    R = {l: [None] * nb for l in range(lc, L)}
    Ob: dict = {}
    row_sketch = None
    for l in range(L, lc - 1, -1):
        ncl = 2 ** (L - l)
        anchors = {}
        for i in range(2 ** l):
            for j in range(ncl):
                if l == L:
                    a, b = rt.node(L, i)
                    anchors[i * ncl + j] = np.arange(a, b)
                else:
                    ncp = ncl // 2
                    anchors[i * ncl + j] = np.concatenate(
                        [Ob[l + 1][2 * i * ncp + j // 2], Ob[l + 1][(2 * i + 1) * ncp + j // 2]])
        supports = _full_extent(ct, L - l)

        def blocks_of(j, ncl=ncl, anchors=anchors, l=l):
            return [(i * ncl + j, anchors[i * ncl + j]) for i in range(2 ** l)]

        facs, XY = sketch_level(oracle.matvec, n, supports, blocks_of)
        Ob[l] = [None] * nb
        for idx, f in facs.items():
            Ob[l][idx] = anchors[idx][f.skeleton]
            interp = f.interp.astype(dtype, copy=False)
            if l == L:
                U[idx] = interp
            else:
                R[l][idx] = interp
        if l == lc:
            row_sketch = XY

    # column side
    V: list = [None] * nb
    W = {l: [None] * nb for l in range(1, lc + 1)}
    Sb: dict = {}
    for l in range(0, lc + 1):
        ncl = 2 ** (L - l)
        anchors = {}
        for i in range(2 ** l):
            base = (i // 2) * (2 * ncl)
            for j in range(ncl):
                if l == 0:
                    a, b = ct.node(L, j)
                    anchors[i * ncl + j] = np.arange(a, b)
                else:
                    anchors[i * ncl + j] = np.concatenate(
                        [Sb[l - 1][base + 2 * j], Sb[l - 1][base + 2 * j + 1]])
        supports = _full_extent(rt, l)

        def blocks_of(i, ncl=ncl, anchors=anchors):
            return [(i * ncl + j, anchors[i * ncl + j]) for j in range(ncl)]

        facs, _ = sketch_level(oracle.rmatvec, m, supports, blocks_of)
        Sb[l] = [None] * nb
        for idx, f in facs.items():
            Sb[l][idx] = anchors[idx][f.skeleton]
            interp = f.interp.astype(dtype, copy=False)
            if l == 0:
                V[idx] = interp
            else:
                W[l][idx] = interp

    # center: B F^T X_j = K(Ob, S_j) X_j, solved in the least-squares sense
    bf = ButterflyMatrix(pair, dtype, U, R, [None] * nb, W, V, {})
    B: list = [None] * nb
    ncl = 2 ** (L - lc)
    for j in range(ncl):
        Xj, Y, sl = row_sketch[j]
        a, b = ct.node(L - lc, j)
        Xfull = np.zeros((n, Xj.shape[1]), dtype)
        Xfull[a:b] = Xj
        T = _col_sweep(bf, Xfull)
        for i in range(2 ** lc):
            idx = i * ncl + j
            rows = Ob[lc][idx]
            Tij = T[idx]
            r, c = len(rows), Tij.shape[0]
            if r == 0 or c == 0:
                B[idx] = np.zeros((r, c), dtype)
                continue
            Yij = Y[rows, sl]
            sol = sla.lstsq(Tij.T, Yij.T, check_finite=False)[0]
            B[idx] = sol.T.astype(dtype, copy=False)
            add_flops("random_matvec", 2 * Tij.shape[1] * c * c, dtype)
    bf.B = B
    bf.stats["matvec_columns"] = columns_used
    return bf


# --- inspection --------------------------------------------------------------

def bf_max_rank(bf: ButterflyMatrix) -> int:
    ranks = [f.shape[1] for f in bf.U + bf.V]
    for lst in list(bf.R.values()) + list(bf.W.values()):
        ranks += [f.shape[1] for f in lst]
    ranks += [max(b.shape) for b in bf.B]
    return max(ranks, default=0)


def bf_memory(bf: ButterflyMatrix) -> int:
    return int(sum(f.size for f in bf.factors()))


def bf_stats(bf: ButterflyMatrix) -> dict:
    mem = bf_memory(bf)
    return {"max_rank": bf_max_rank(bf), "memory_units": mem, "flops_to_apply": 2 * mem}
