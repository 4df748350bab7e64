"""Multifrontal factorization with dense or HOD-BF compressed fronts.

Fronts are visited in postorder.  A front with dimension below ``n_min`` is
assembled densely (extend-add), LU-factored with partial pivoting and
Schur-updated.  Larger fronts are never formed: their blocks are compressed
directly from an entry oracle that sums sparse-matrix entries and the
children's contribution blocks.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .butterfly import (DEFAULT_ALPHA, DEFAULT_KNN, ButterflyMatrix, EntryOracle, MatvecOracle,
                        NeighborLists, PartitionPair, bf_entry_eval, bf_extract, bf_matvec,
                        bf_max_rank, bf_memory, bf_random_matvec)
from .counters import FlopCounter, add_flops, gemm_flops
from .hodbf import (HodbfInverse, HodbfMatrix, hodbf_entry_eval, hodbf_extract,
                    hodbf_inverse_max_rank, hodbf_inverse_memory, hodbf_invert, hodbf_max_rank,
                    hodbf_to_dense, lu_factor_quiet)
from .ordering import (AssemblyTree, HierarchicalPartition, StructuralGraph, TreeNode,
                       balanced_partition, nested_dissection, reorder_separators,
                       separator_hierarchy)
from .sparse import Permutation, SparseMatrix, gather_pairs, gather_sparse, permute_symmetric


class NumericalFailure(ArithmeticError):
    """Factorization or solve could not proceed for numerical reasons."""


class SingularFrontError(NumericalFailure):
    """A fully-summed block has an exactly zero pivot."""


class CompressionError(NumericalFailure):
    """Compressing or inverting a block of a front failed."""


@dataclass(frozen=True)
class SolverOptions:
    """Factorization settings; ``kind='exact'`` ignores the compression fields."""

    kind: str = "exact"
    eps: float = 1e-3
    n_min: float = 1000
    alpha: float = DEFAULT_ALPHA
    k_nn: int = DEFAULT_KNN
    nd_leaf: int = 32
    hodbf_leaf: int = 32
    seed: int = 0
    rmax: int | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "hodbf"):
            raise ValueError(f"unknown solver kind '{self.kind}'")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.nd_leaf < 1 or self.hodbf_leaf < 1:
            raise ValueError("leaf sizes must be positive")
        if self.n_min < 2 * self.hodbf_leaf:
            raise ValueError("n_min must be at least twice the HOD-BF leaf size")
        if self.alpha <= 0 or self.k_nn < 0:
            raise ValueError("alpha must be positive and k_nn non-negative")

    def compresses(self, dim) -> bool:
        return self.kind == "hodbf" and dim >= self.n_min


# --- symbolic analysis -------------------------------------------------------

@dataclass(eq=False)
class Analysis:
    """Orderings and trees shared by the numerical phases.

    ``perm`` is the combined fill-reducing and separator reordering;
    ``A`` and ``graph`` are already permuted by it.  ``hierarchies`` maps a
    compressed node to the cluster tree of its fully-summed block.
    """

    perm: Permutation
    tree: AssemblyTree
    A: SparseMatrix
    graph: StructuralGraph
    hierarchies: dict

    @property
    def n(self) -> int:
        return self.tree.n


def analyze(A: SparseMatrix, opts: SolverOptions = SolverOptions()) -> Analysis:
    """Nested dissection, then recursive bisection of every separator that will be compressed.

    Separators are bisected in their distance-2 graph: a level-set separator
    of a 7-point stencil has no internal edges at all.
    """
    if A.nrows != A.ncols:
        raise ValueError("the system matrix must be square")
    g = StructuralGraph.from_matrix(A)
    p, tree = nested_dissection(g, opts.nd_leaf)
    orders, hier = {}, {}
    for nd in tree.nodes:
        if opts.compresses(nd.dim):
            sub = g.reach_subgraph(p.forward[nd.start:nd.stop])
            h = separator_hierarchy(sub, np.arange(nd.ns), opts.hodbf_leaf)
            orders[nd.index] = h.order
            hier[nd.index] = HierarchicalPartition(np.arange(nd.ns), h.offsets)
    if orders:
        p = reorder_separators(tree, p, orders)
    Ap = permute_symmetric(A, p)
    return Analysis(p, tree, Ap, StructuralGraph.from_matrix(Ap), hier)


# --- fronts ------------------------------------------------------------------

@dataclass(eq=False)
class DenseFront:
    """``F11 = P L U`` plus ``U12 = L^{-1} P^T F12`` and ``L21 = F21 U^{-1}``."""

    node: TreeNode
    lu: np.ndarray
    row_perm: np.ndarray
    U12: np.ndarray
    L21: np.ndarray

    compressed = False

    @property
    def memory(self) -> int:
        return int(self.lu.size + self.U12.size + self.L21.size)

    @property
    def max_rank(self) -> int:
        return 0

    def forward(self, y):
        nd = self.node
        ys = sla.solve_triangular(self.lu, y[nd.start:nd.stop][self.row_perm], lower=True,
                                  unit_diagonal=True, check_finite=False)
        y[nd.start:nd.stop] = ys
        if nd.nu:
            y[nd.update] -= self.L21 @ ys
        add_flops("solve", nd.ns ** 2 * y.shape[1] + gemm_flops(nd.nu, nd.ns, y.shape[1]), y.dtype)

    def backward(self, y):
        nd = self.node
        ys = y[nd.start:nd.stop]
        if nd.nu:
            ys = ys - self.U12 @ y[nd.update]
        y[nd.start:nd.stop] = sla.solve_triangular(self.lu, ys, lower=False, check_finite=False)
        add_flops("solve", nd.ns ** 2 * y.shape[1] + gemm_flops(nd.ns, nd.nu, y.shape[1]), y.dtype)


@dataclass(eq=False)
class CompressedFront:
    """HOD-BF fully-summed block with butterfly coupling blocks.

    ``F11`` is kept only when requested; the solve needs ``F11inv``, ``F12``
    and ``F21``.
    """

    node: TreeNode
    F11inv: HodbfInverse
    F12: ButterflyMatrix | None
    F21: ButterflyMatrix | None
    F11: HodbfMatrix | None = None
    ranks: dict = field(default_factory=dict)

    compressed = True

    @property
    def memory(self) -> int:
        m = hodbf_inverse_memory(self.F11inv)
        for b in (self.F12, self.F21):
            if b is not None:
                m += bf_memory(b)
        return int(m)

    @property
    def max_rank(self) -> int:
        return max(self.ranks.values(), default=0)

    def forward(self, y):
        nd = self.node
        z = self.F11inv.apply(y[nd.start:nd.stop])
        y[nd.start:nd.stop] = z
        if nd.nu:
            y[nd.update] -= bf_matvec(self.F21, z)

    def backward(self, y):
        nd = self.node
        if nd.nu:
            y[nd.start:nd.stop] -= self.F11inv.apply(bf_matvec(self.F12, y[nd.update]))


def dense_front_memory(nd: TreeNode) -> int:
    """Stored scalars of an uncompressed front: LU of ``F11`` plus ``F12`` and ``F21``."""
    return nd.ns ** 2 + 2 * nd.ns * nd.nu


# --- extend-add by extraction ------------------------------------------------

@dataclass(eq=False)
class FrontContext:
    """Index maps of one front and the contribution blocks of its children.

    Front-local index ``x`` is global (permuted) index ``idx[x]``; the first
    ``ns`` are fully summed.  ``children`` holds ``(cb, cmap)`` where
    ``cmap[x]`` is the position of ``idx[x]`` in the child's update set or -1.
    """

    A: SparseMatrix
    node: TreeNode
    idx: np.ndarray
    children: list

    @property
    def ns(self) -> int:
        return self.node.ns

    @property
    def dim(self) -> int:
        return len(self.idx)


def front_context(A: SparseMatrix, tree: AssemblyTree, nd: TreeNode, cbs: dict) -> FrontContext:
    idx = np.concatenate([nd.sep, nd.update]).astype(np.int64)
    children = []
    for c in nd.children:
        ch = tree.nodes[c]
        if ch.nu == 0:
            continue
        pos = np.searchsorted(idx, ch.update)
        if np.any(pos >= len(idx)) or np.any(idx[np.minimum(pos, len(idx) - 1)] != ch.update):
            raise ValueError(f"update set of node {c} is not contained in front {nd.index}")
        cmap = np.full(len(idx), -1, dtype=np.int64)
        cmap[pos] = np.arange(ch.nu)
        children.append((cbs[c], cmap))
    return FrontContext(A, nd, idx, children)


class FrontOracle(EntryOracle):
    """Entries of one block of ``F = A-part (+) CB_1 (+) ... - S``.

    The block starts at front-local ``(r0, c0)``.  Each batched ``extract``
    issues one sparse gather for all requests together and one extraction per
    child contribution block.  ``minus`` is an optional butterfly subtracted
    from the block (in block-local coordinates).
    """

    def __init__(self, ctx: FrontContext, r0, c0, shape, neighbors=None, minus=None):
        self.ctx = ctx
        self.r0, self.c0 = int(r0), int(c0)
        self.shape = tuple(int(s) for s in shape)
        self.dtype = np.dtype(np.result_type(ctx.A.dtype, np.float64))
        self.neighbors = neighbors
        self.minus = minus
        self.last_split = None

    def extract(self, requests):
        ctx = self.ctx
        ns = ctx.ns
        fronts = []
        for rows, cols in requests:
            rows = np.asarray(rows, dtype=np.int64)
            cols = np.asarray(cols, dtype=np.int64)
            if rows.size and (rows.min() < 0 or rows.max() >= self.shape[0]):
                raise IndexError(f"row index outside the front block of node {ctx.node.index}")
            if cols.size and (cols.min() < 0 or cols.max() >= self.shape[1]):
                raise IndexError(f"column index outside the front block of node {ctx.node.index}")
            fronts.append((rows + self.r0, cols + self.c0))
        out = [np.zeros((r.size, c.size), dtype=self.dtype) for r, c in fronts]
        split = {"sparse": [], "children": [[] for _ in ctx.children]}
        # sparse entries live in the fully-summed rows and columns only
        ri, ci, where = [], [], []
        for q, (fr, fc) in enumerate(fronts):
            if fr.size == 0 or fc.size == 0:
                continue
            rs = np.flatnonzero(fr < ns)
            cs = np.flatnonzero(fc < ns)
            if rs.size == 0 and cs.size == 0:
                continue
            split["sparse"].append((fr.size, fc.size))
            R, C = np.meshgrid(np.arange(fr.size), np.arange(fc.size), indexing="ij")
            mask = (fr[R] < ns) | (fc[C] < ns)
            ri.append(ctx.idx[fr[R[mask]]])
            ci.append(ctx.idx[fc[C[mask]]])
            where.append((q, R[mask], C[mask]))
        if ri:
            vals = gather_pairs(ctx.A, np.concatenate(ri), np.concatenate(ci))
            at = 0
            for q, rr, cc in where:
                out[q][rr, cc] += vals[at:at + rr.size]
                at += rr.size
        for k, (cb, cmap) in enumerate(ctx.children):
            items = []
            for q, (fr, fc) in enumerate(fronts):
                rl, cl = cmap[fr], cmap[fc]
                rsel = np.flatnonzero(rl >= 0)
                csel = np.flatnonzero(cl >= 0)
                if rsel.size and csel.size:
                    items.append((q, rsel, csel, rl[rsel], cl[csel]))
            split["children"][k] = [(len(it[1]), len(it[2])) for it in items]
            if not items:
                continue
            if isinstance(cb, HodbfMatrix):
                blocks = hodbf_extract(cb, [(r, c) for _, _, _, r, c in items])
            else:
                blocks = [cb[np.ix_(r, c)] for _, _, _, r, c in items]
                add_flops("assembly", sum(b.size for b in blocks), self.dtype)
            for (q, rsel, csel, _, _), b in zip(items, blocks):
                out[q][np.ix_(rsel, csel)] += b
        if self.minus is not None:
            reqs = [(fr - self.r0, fc - self.c0) for fr, fc in fronts]
            for q, b in enumerate(bf_extract(self.minus, reqs)):
                out[q] -= b
        self.last_split = split
        return out


_BLOCKS = {
    "F11": lambda ns, nu: (0, 0, ns, ns),
    "F12": lambda ns, nu: (0, ns, ns, nu),
    "F21": lambda ns, nu: (ns, 0, nu, ns),
    "F22": lambda ns, nu: (ns, ns, nu, nu),
    "F": lambda ns, nu: (0, 0, ns + nu, ns + nu),
}


def front_entry_oracle(A: SparseMatrix, tree: AssemblyTree, node: int, cbs: dict,
                       which: str = "F", neighbors=None, minus=None) -> FrontOracle:
    """Oracle over block ``which`` (``F11``, ``F12``, ``F21``, ``F22`` or ``F``) of a front.

    ``A`` is the permuted matrix; ``cbs`` maps each child to its contribution
    block (dense array or :class:`HodbfMatrix`).
    """
    if which not in _BLOCKS:
        raise ValueError(f"unknown block selector '{which}'")
    nd = tree.nodes[node]
    r0, c0, m, n = _BLOCKS[which](nd.ns, nd.nu)
    return FrontOracle(front_context(A, tree, nd, cbs), r0, c0, (m, n), neighbors, minus)


def assemble_dense(ctx: FrontContext) -> np.ndarray:
    """Dense extend-add of the sparse entries and the children's blocks."""
    nd = ctx.node
    dtype = np.result_type(ctx.A.dtype, np.float64)
    F = np.zeros((ctx.dim, ctx.dim), dtype=dtype)
    F[:nd.ns, :] = gather_sparse(ctx.A, nd.sep, ctx.idx)
    if nd.nu:
        F[nd.ns:, :nd.ns] = gather_sparse(ctx.A, nd.update, nd.sep)
    for cb, cmap in ctx.children:
        if isinstance(cb, HodbfMatrix):
            cb = hodbf_to_dense(cb)
        pos = np.flatnonzero(cmap >= 0)
        F[np.ix_(pos, pos)] += cb[np.ix_(cmap[pos], cmap[pos])]
        add_flops("assembly", cb.size, dtype)
    return F


def _swap_to_perm(piv):
    """Row order ``perm`` with ``P^T X = X[perm]`` from LAPACK sequential swaps."""
    perm = np.arange(len(piv))
    for i, p in enumerate(piv):
        if p != i:
            perm[i], perm[p] = perm[p], perm[i]
    return perm


def factor_dense_front(nd: TreeNode, F: np.ndarray):
    """Partial-pivoted LU of ``F11`` and the Schur update; returns ``(front, CB)``."""
    ns, nu = nd.ns, nd.nu
    F11 = F[:ns, :ns]
    lu, piv = lu_factor_quiet(F11)
    if np.any(np.diag(lu) == 0):
        raise SingularFrontError(f"front {nd.index} has a zero pivot in F11")
    perm = _swap_to_perm(piv)
    dtype = F.dtype
    add_flops("factor_dense", 2 * ns ** 3 // 3, dtype)
    if nu:
        U12 = sla.solve_triangular(lu, F[:ns, ns:][perm], lower=True, unit_diagonal=True,
                                   check_finite=False)
        L21 = sla.solve_triangular(lu, F[ns:, :ns].T, trans="T", lower=False,
                                   check_finite=False).T
        C = F[ns:, ns:] - L21 @ U12
        add_flops("factor_dense", 2 * ns * ns * nu + gemm_flops(nu, ns, nu), dtype)
    else:
        U12 = np.zeros((ns, 0), dtype=dtype)
        L21 = np.zeros((0, ns), dtype=dtype)
        C = None
    return DenseFront(nd, lu, perm, np.ascontiguousarray(U12), np.ascontiguousarray(L21)), C


def _compress_front(ana: Analysis, nd: TreeNode, ctx: FrontContext, opts: SolverOptions, rng,
                    keep_f11=False):
    """Compressed path for one front; returns ``(front, CB)`` with ``CB`` an HOD-BF matrix."""
    ns, nu = nd.ns, nd.nu
    gp = ana.graph
    kw = dict(alpha=opts.alpha, k_nn=opts.k_nn, rmax=opts.rmax)
    dtype = np.dtype(np.result_type(ana.A.dtype, np.float64))
    T11 = ana.hierarchies[nd.index]
    T22 = balanced_partition(nu, opts.hodbf_leaf) if nu else None
    ranks = {}

    def guarded(block, fn):
        try:
            return fn()
        except (ValueError, np.linalg.LinAlgError, ArithmeticError) as exc:
            raise CompressionError(f"front {nd.index}, block {block}: {exc}") from exc

    sub_s = gp.reach_subgraph(nd.sep)
    nb11 = NeighborLists.from_graph(sub_s.adj, np.arange(ns), np.arange(ns), opts.k_nn)
    F11 = guarded("F11", lambda: hodbf_entry_eval(
        FrontOracle(ctx, 0, 0, (ns, ns), nb11), T11, opts.eps, **kw))
    ranks["F11"] = hodbf_max_rank(F11)
    F11inv = guarded("F11inv", lambda: hodbf_invert(F11, opts.eps, rng))
    ranks["F11inv"] = hodbf_inverse_max_rank(F11inv)
    if not nu:
        return CompressedFront(nd, F11inv, None, None, F11 if keep_f11 else None, ranks), None
    sub_f = gp.reach_subgraph(ctx.idx)
    nb12 = NeighborLists.from_graph(sub_f.adj, np.arange(ns), np.arange(ns, ns + nu), opts.k_nn)
    F12 = guarded("F12", lambda: bf_entry_eval(
        FrontOracle(ctx, 0, ns, (ns, nu), nb12), PartitionPair(T11, T22), opts.eps, **kw))
    F21 = guarded("F21", lambda: bf_entry_eval(
        FrontOracle(ctx, ns, 0, (nu, ns), nb12.transpose()), PartitionPair(T22, T11),
        opts.eps, **kw))
    ranks["F12"] = bf_max_rank(F12)
    ranks["F21"] = bf_max_rank(F21)
    schur = MatvecOracle(
        (nu, nu), dtype,
        lambda X: bf_matvec(F21, F11inv.apply(bf_matvec(F12, X))),
        lambda Y: bf_matvec(F12, F11inv.apply(bf_matvec(F21, Y, transpose=True), transpose=True),
                            transpose=True))
    S = guarded("S", lambda: bf_random_matvec(schur, PartitionPair(T22, T22), opts.eps, rng,
                                              rmax=opts.rmax))
    ranks["S"] = bf_max_rank(S)
    sub_u = gp.reach_subgraph(nd.update)
    nb22 = NeighborLists.from_graph(sub_u.adj, np.arange(nu), np.arange(nu), opts.k_nn)
    CB = guarded("CB", lambda: hodbf_entry_eval(
        FrontOracle(ctx, ns, ns, (nu, nu), nb22, minus=S), T22, opts.eps, **kw))
    ranks["CB"] = hodbf_max_rank(CB)
    front = CompressedFront(nd, F11inv, F12, F21, F11 if keep_f11 else None, ranks)
    return front, CB


# --- factorization -----------------------------------------------------------

@dataclass(eq=False)
class Factorization:
    """Per-node fronts for the solve phase plus factorization counters."""

    analysis: Analysis
    opts: SolverOptions
    fronts: dict
    flops: FlopCounter
    front_stats: list
    peak_live_cbs: int
    factor_time_s: float = 0.0

    @property
    def n(self) -> int:
        return self.analysis.n

    @property
    def dtype(self):
        return np.result_type(self.analysis.A.dtype, np.float64)

    @property
    def memory(self) -> int:
        return int(sum(f.memory for f in self.fronts.values()))

    @property
    def dense_memory(self) -> int:
        """Memory an uncompressed factorization with the same tree would need."""
        return int(sum(dense_front_memory(f.node) for f in self.fronts.values()))

    @property
    def compressed_nodes(self) -> list:
        return [i for i, f in self.fronts.items() if f.compressed]

    @property
    def max_rank(self) -> int:
        return max((f.max_rank for f in self.fronts.values()), default=0)

    def solve(self, b, flops: FlopCounter | None = None):
        return mf_solve(self, b, flops)


def factor(A: SparseMatrix, opts: SolverOptions = SolverOptions(), analysis: Analysis | None = None,
           keep_f11: bool = False) -> Factorization:
    """Postorder multifrontal factorization of ``A`` with the given options."""
    t0 = time.perf_counter()
    ana = analyze(A, opts) if analysis is None else analysis
    if ana.n != A.nrows:
        raise ValueError("analysis does not match the matrix size")
    tree = ana.tree
    rng = np.random.default_rng(opts.seed)
    counter = FlopCounter()
    fronts, cbs, stats = {}, {}, []
    peak = 0
    with counter.active():
        for nd in tree.postorder():
            before = counter.total
            ctx = front_context(ana.A, tree, nd, cbs)
            compressed = opts.compresses(nd.dim) and nd.index in ana.hierarchies
            if compressed:
                front, cb = _compress_front(ana, nd, ctx, opts, rng, keep_f11)
            else:
                front, cb = factor_dense_front(nd, assemble_dense(ctx))
            for c in nd.children:
                cbs.pop(c, None)
            if cb is not None:
                cbs[nd.index] = cb
            peak = max(peak, len(cbs))
            fronts[nd.index] = front
            stats.append({
                "node": nd.index, "ns": nd.ns, "nu": nd.nu, "dim": nd.dim,
                "compressed": compressed, "memory_units": front.memory,
                "dense_memory_units": dense_front_memory(nd), "max_rank": front.max_rank,
                "flops": counter.total - before,
            })
    if cbs:
        raise AssertionError("contribution blocks left over after factorization")
    out = Factorization(ana, opts, fronts, counter, stats, peak)
    out.factor_time_s = time.perf_counter() - t0
    return out


def factor_exact(A: SparseMatrix, opts: SolverOptions = SolverOptions(), analysis=None):
    return factor(A, replace(opts, kind="exact"), analysis)


def factor_hodbf(A: SparseMatrix, opts: SolverOptions = SolverOptions(kind="hodbf"),
                 analysis=None, keep_f11=False):
    return factor(A, replace(opts, kind="hodbf"), analysis, keep_f11)


def mf_solve(F: Factorization, b, flops: FlopCounter | None = None):
    """Forward sweep over the tree in postorder, then the backward sweep in reverse."""
    b = np.asarray(b)
    vec = b.ndim == 1
    if b.shape[0] != F.n:
        raise ValueError(f"dimension mismatch: factorization is {F.n}, right-hand side {b.shape[0]}")
    fwd = F.analysis.perm.forward
    y = b[fwd].reshape(F.n, -1).astype(np.result_type(F.dtype, b.dtype), copy=True)
    counter = flops if flops is not None else FlopCounter()
    with counter.active():
        for nd in F.analysis.tree.postorder():
            F.fronts[nd.index].forward(y)
        for nd in reversed(F.analysis.tree.postorder()):
            F.fronts[nd.index].backward(y)
    x = np.empty_like(y)
    x[fwd] = y
    return x[:, 0] if vec else x


def top_fronts(F: Factorization, k: int = 5) -> list:
    """The ``k`` largest fronts by dimension (ties by node index)."""
    return sorted(F.front_stats, key=lambda s: (-s["dim"], s["node"]))[:k]


def compression_summary(F: Factorization) -> dict:
    """Memory of the compressed fronts against their uncompressed size."""
    comp = [s for s in F.front_stats if s["compressed"]]
    mem = sum(s["memory_units"] for s in comp)
    dense = sum(s["dense_memory_units"] for s in comp)
    return {"fronts": len(comp), "memory_units": mem, "dense_memory_units": dense,
            "ratio": mem / dense if dense else math.nan}
