"""Fill-reducing nested dissection, assembly trees and graph-distance neighbours.

Everything here is purely structural: values of the matrix are never read.
Ties are broken by ascending vertex index so all orderings are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .sparse import Permutation, SparseMatrix

BALANCE = 0.2


class StructuralGraph:
    """Symmetric adjacency of ``pattern(A + A^T)`` without self loops."""

    def __init__(self, adjacency):
        adj = sp.csr_matrix(adjacency, dtype=np.int8)
        adj = ((adj + adj.T) != 0).astype(np.int8).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        adj.sort_indices()
        self.adj = adj

    @classmethod
    def from_matrix(cls, A: SparseMatrix) -> "StructuralGraph":
        pattern = sp.csr_matrix((np.ones(A.nnz, dtype=np.int8), A.indices, A.indptr),
                                shape=A.shape)
        return cls(pattern)

    @classmethod
    def from_edges(cls, n, edges) -> "StructuralGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        adj = sp.coo_matrix((np.ones(len(edges), dtype=np.int8), (edges[:, 0], edges[:, 1])),
                            shape=(n, n))
        return cls(adj)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    def neighbors(self, v) -> np.ndarray:
        return self.adj.indices[self.adj.indptr[v]:self.adj.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adj.indptr)

    def subgraph(self, vertices) -> "StructuralGraph":
        vertices = np.asarray(vertices, dtype=np.int64)
        g = StructuralGraph.__new__(StructuralGraph)
        g.adj = self.adj[vertices][:, vertices].tocsr()
        g.adj.sort_indices()
        return g

    def reach_subgraph(self, vertices) -> "StructuralGraph":
        """Graph on ``vertices`` joining pairs at distance <= 2 in the whole graph.

        Paths may pass through vertices outside the set, which is how
        eliminated unknowns couple the remaining ones.
        """
        vertices = np.asarray(vertices, dtype=np.int64)
        rows = self.adj[vertices].astype(np.int32)
        two = rows @ rows.T + rows[:, vertices]
        return StructuralGraph(two)


# --- bisection ---------------------------------------------------------------

def _bfs_depths(adj, start):
    return csgraph.shortest_path(adj, unweighted=True, directed=False, indices=start)


def _pseudo_peripheral(adj, start=0):
    deg = np.diff(adj.indptr)
    d = _bfs_depths(adj, start)
    ecc = d[np.isfinite(d)].max()
    for _ in range(8):
        last = np.flatnonzero(d == ecc)
        cand = last[np.lexsort((last, deg[last]))[0]]
        d2 = _bfs_depths(adj, cand)
        ecc2 = d2[np.isfinite(d2)].max()
        if ecc2 <= ecc:
            break
        start, d, ecc = cand, d2, ecc2
    return start, d


def _balance_ok(a, b, n):
    return abs(a - b) <= max(1.0, BALANCE * n)


def _bisect_connected(adj):
    n = adj.shape[0]
    if n == 1:
        return np.array([0]), np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    u, du = _pseudo_peripheral(adj)
    du = du.astype(np.int64)
    ecc = int(du.max())
    if ecc <= 1:
        # clique-like: no level separator, split the vertex list in half
        h = n // 2
        a, b = np.arange(h), np.arange(h, n)
        s = _cover(adj, a, b)
        a = np.setdiff1d(a, s)
        b = np.setdiff1d(b, s)
        return a, b, s
    # Candidate level functions: BFS depth from u, and depth differences
    # d_u - d_v for min-degree vertices v at several distances (on grids the
    # latter yields coordinate-plane cuts instead of diagonal ones).
    deg = np.diff(adj.indptr)
    funcs = [du]
    seen = set()
    for q in (1.0, 0.75, 0.5, 0.25):
        ring = np.flatnonzero(du == max(1, int(round(q * ecc))))
        v = int(ring[np.lexsort((ring, deg[ring]))[0]])
        if v in seen:
            continue
        seen.add(v)
        dv = _bfs_depths(adj, v).astype(np.int64)
        funcs.append(du - dv)
    coo = adj.tocoo()
    best = None
    for fi, f in enumerate(funcs):
        width = int(np.abs(f[coo.row] - f[coo.col]).max())
        f0 = f - f.min()
        counts = np.bincount(f0)
        before = np.concatenate([[0], np.cumsum(counts)])
        nlev = len(counts)
        for t in range(1, nlev - width):
            p0 = before[t]
            s = before[t + width] - before[t]
            p1 = n - before[t + width]
            if p0 == 0 or p1 == 0:
                continue
            feasible = _balance_ok(p0, p1, n)
            # ratio-cut score keeps cuts near the middle among feasible ones
            score = s / (float(p0) * float(p1)) if feasible else abs(p0 - p1)
            key = (0 if feasible else 1, score, fi, t)
            if best is None or key < best[0]:
                best = (key, f0, t, width)
    if best is None:
        h = n // 2
        a, b = np.arange(h), np.arange(h, n)
        s = _cover(adj, a, b)
        return np.setdiff1d(a, s), np.setdiff1d(b, s), s
    _, f0, t, width = best
    part = np.where(f0 < t, 0, np.where(f0 >= t + width, 1, 2))
    _refine(adj, part, n)
    idx = np.arange(n)
    return idx[part == 0], idx[part == 1], idx[part == 2]


def _edgeless(adj, a, b):
    return adj[a][:, b].nnz == 0


def _cover(adj, a, b):
    """Smaller side of the boundary between ``a`` and ``b``."""
    cross = adj[a][:, b].tocoo()
    ba = np.unique(a[cross.row])
    bb = np.unique(b[cross.col])
    return ba if len(ba) <= len(bb) else bb


def _refine(adj, part, n):
    """Move separator vertices that touch only one side into that side."""
    sep = np.flatnonzero(part == 2)
    sizes = [np.count_nonzero(part == 0), np.count_nonzero(part == 1)]
    for v in sep:
        nb = adj.indices[adj.indptr[v]:adj.indptr[v + 1]]
        touch0 = np.any(part[nb] == 0)
        touch1 = np.any(part[nb] == 1)
        if touch0 and touch1:
            continue
        options = []
        if not touch1:
            options.append(0)
        if not touch0:
            options.append(1)
        # prefer the side that keeps (or restores) balance
        options.sort(key=lambda s: (sizes[s], s))
        for side in options:
            a = sizes[0] + (side == 0)
            b = sizes[1] + (side == 1)
            if _balance_ok(a, b, n) or not _balance_ok(*sizes, n):
                part[v] = side
                sizes[side] += 1
                break


def bisect_graph(g: StructuralGraph):
    """Vertex separator ``(part0, part1, separator)`` with no part0-part1 edges.

    Balance target is ``|#part0 - #part1| <= max(1, 0.2 n)``; it is met whenever
    a BFS level structure allows it (a star graph, for example, does not).
    """
    n = g.n
    if n == 0:
        raise ValueError("cannot bisect an empty graph")
    ncomp, labels = csgraph.connected_components(g.adj, directed=False)
    if ncomp == 1:
        p0, p1, s = _bisect_connected(g.adj)
        return np.sort(p0), np.sort(p1), np.sort(s)

    comps = [np.flatnonzero(labels == c) for c in range(ncomp)]
    comps.sort(key=lambda c: (-len(c), c[0]))
    parts = [[], []]
    sizes = [0, 0]
    for c in comps:
        side = 0 if sizes[0] <= sizes[1] else 1
        parts[side].append(c)
        sizes[side] += len(c)
    if _balance_ok(sizes[0], sizes[1], n):
        return (np.sort(np.concatenate(parts[0])), np.sort(np.concatenate(parts[1])),
                np.array([], dtype=np.int64))
    # the largest component dominates: split it and pack the rest around it
    big = comps[0]
    a, b, s = _bisect_connected(g.adj[big][:, big].tocsr())
    a, b, s = big[a], big[b], big[s]
    parts = [[a], [b]]
    sizes = [len(a), len(b)]
    for c in comps[1:]:
        side = 0 if sizes[0] <= sizes[1] else 1
        parts[side].append(c)
        sizes[side] += len(c)
    return np.sort(np.concatenate(parts[0])), np.sort(np.concatenate(parts[1])), np.sort(s)


# --- hierarchical partitions -------------------------------------------------

@dataclass
class HierarchicalPartition:
    """Binary cluster tree over positions ``0..n-1`` with all leaves at depth ``levels``.

    ``order[pos]`` is the local index (into the original index set) placed at
    position ``pos``; node ``(l, i)`` owns positions ``offsets[l][i]:offsets[l][i+1]``.
    """

    order: np.ndarray
    offsets: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def levels(self) -> int:
        return len(self.offsets) - 1

    def node(self, level, i):
        o = self.offsets[level]
        return int(o[i]), int(o[i + 1])

    def size(self, level, i):
        a, b = self.node(level, i)
        return b - a

    def leaf_of(self, pos, level=None):
        """Index of the node at ``level`` (default: leaves) containing each position."""
        level = self.levels if level is None else level
        return np.searchsorted(self.offsets[level], pos, side="right") - 1

    def truncate(self, levels) -> "HierarchicalPartition":
        """Drop the deepest levels so the tree has exactly ``levels`` levels."""
        levels = min(levels, self.levels)
        return HierarchicalPartition(self.order, [o.copy() for o in self.offsets[:levels + 1]])

    def subtree(self, level, i) -> "HierarchicalPartition":
        """Tree rooted at node ``(level, i)``, in positions relative to its start."""
        a, _ = self.node(level, i)
        offs = []
        for d in range(self.levels - level + 1):
            width = 2 ** d
            o = self.offsets[level + d][i * width:(i + 1) * width + 1] - a
            offs.append(o)
        b = self.node(level, i)[1]
        return HierarchicalPartition(np.arange(b - a), offs)

    def leaves(self):
        o = self.offsets[-1]
        return [(int(o[i]), int(o[i + 1])) for i in range(len(o) - 1)]


def tree_depth(n, leaf_size):
    if n <= leaf_size or n <= 1:
        return 0
    return int(np.ceil(np.log2(n / leaf_size)))


def balanced_partition(n, leaf_size=None, levels=None) -> HierarchicalPartition:
    """Balanced binary tree over ``n`` positions in their given order."""
    if levels is None:
        levels = tree_depth(n, leaf_size)
    offsets = [np.array([0, n], dtype=np.int64)]
    for _ in range(levels):
        prev = offsets[-1]
        mids = (prev[:-1] + prev[1:]) // 2
        nxt = np.empty(2 * len(prev) - 1, dtype=np.int64)
        nxt[0::2] = prev
        nxt[1::2] = mids
        offsets.append(nxt)
    return HierarchicalPartition(np.arange(n), offsets)


def separator_hierarchy(g: StructuralGraph, sep, leaf_size) -> HierarchicalPartition:
    """Recursive graph bisection of the subgraph induced by ``sep``.

    The returned ``order`` indexes into ``sep`` (as given); every node at a level
    above the leaves is split in two, so all leaves share the same depth.
    """
    sep = np.asarray(sep, dtype=np.int64)
    n = len(sep)
    levels = tree_depth(n, leaf_size)
    sub = g.subgraph(sep)
    order_chunks = [np.arange(n)]
    offsets = [np.array([0, n], dtype=np.int64)]
    for _ in range(levels):
        new_chunks, new_off = [], [0]
        for chunk in order_chunks:
            a, b = _split_two(sub, chunk)
            new_chunks += [a, b]
            new_off += [new_off[-1] + len(a), new_off[-1] + len(a) + len(b)]
        order_chunks = new_chunks
        offsets.append(np.array(new_off, dtype=np.int64))
    order = np.concatenate(order_chunks) if order_chunks else np.arange(0)
    return HierarchicalPartition(order.astype(np.int64), offsets)


def _split_two(sub: StructuralGraph, chunk):
    """Two-way split of ``chunk`` (separator vertices go to the smaller side)."""
    if len(chunk) <= 1:
        return chunk, chunk[:0]
    g = sub.subgraph(chunk)
    p0, p1, s = bisect_graph(g)
    side = np.full(len(chunk), -1)
    side[p0], side[p1] = 0, 1
    sizes = [len(p0), len(p1)]
    # attach separator vertices to an adjacent side so that parts stay connected
    pending = list(s)
    while pending:
        left = []
        for v in pending:
            touch = {int(side[u]) for u in g.neighbors(v) if side[u] >= 0}
            if not touch:
                left.append(v)
                continue
            k = min(touch, key=lambda t: (sizes[t], t))
            side[v] = k
            sizes[k] += 1
        if len(left) == len(pending):
            for v in left:
                k = 0 if sizes[0] <= sizes[1] else 1
                side[v] = k
                sizes[k] += 1
            break
        pending = left
    # stray components of one side join the other side when they touch it
    for k in (1, 0):
        part = np.flatnonzero(side == k)
        ncomp, lab = csgraph.connected_components(g.adj[part][:, part], directed=False)
        if ncomp < 2:
            continue
        keep = np.argmax(np.bincount(lab))
        for c in range(ncomp):
            comp = part[lab == c]
            if c != keep and np.any(side[g.adj[comp].indices] == 1 - k):
                side[comp] = 1 - k
    p0 = np.flatnonzero(side == 0)
    p1 = np.flatnonzero(side == 1)
    if len(p0) == 0 or len(p1) == 0:
        half = len(chunk) // 2
        return chunk[:half], chunk[half:]
    return chunk[p0], chunk[p1]


# --- nested dissection -------------------------------------------------------

@dataclass
class TreeNode:
    """One front: fully-summed range ``[start, stop)`` in the permuted order."""

    index: int
    start: int
    stop: int
    children: list = field(default_factory=list)
    parent: int = -1
    update: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    level: int = 0

    @property
    def sep(self) -> np.ndarray:
        return np.arange(self.start, self.stop)

    @property
    def ns(self) -> int:
        return self.stop - self.start

    @property
    def nu(self) -> int:
        return len(self.update)

    @property
    def dim(self) -> int:
        return self.ns + self.nu


@dataclass
class AssemblyTree:
    """Postorder list of fronts over permuted indices; roots have no update set."""

    nodes: list
    roots: list
    n: int

    def postorder(self):
        return self.nodes

    def depth(self) -> int:
        return max((nd.level for nd in self.nodes), default=0) + 1

    def check(self):
        covered = np.zeros(self.n, dtype=np.int64)
        for nd in self.nodes:
            covered[nd.start:nd.stop] += 1
            for c in nd.children:
                ch = self.nodes[c]
                allowed = np.union1d(nd.sep, nd.update)
                if not np.all(np.isin(ch.update, allowed)):
                    raise AssertionError(f"update set of {c} not contained in parent {nd.index}")
        if not np.all(covered == 1):
            raise AssertionError("fully-summed sets do not partition the index set")
        for r in self.roots:
            if self.nodes[r].nu:
                raise AssertionError("root has a non-empty update set")


def nested_dissection(g: StructuralGraph, leaf_size: int = 32):
    """Return ``(Permutation, AssemblyTree)`` by recursive vertex-separator dissection.

    Separators become fronts ordered after both halves; disconnected pieces become
    independent subtrees (the tree may be a forest).
    """
    n = g.n
    if n == 0:
        raise ValueError("empty graph")
    perm = []
    nodes = []

    def build(verts, sub):
        """Order ``verts`` (global ids) and return the list of subtree roots."""
        if len(verts) <= leaf_size:
            return [_new_node(sorted_ids(verts))]
        p0, p1, s = bisect_graph(sub)
        if len(s) == 0:
            if len(p0) == 0 or len(p1) == 0:
                return [_new_node(sorted_ids(verts))]
            return (build(verts[p0], sub.subgraph(p0)) + build(verts[p1], sub.subgraph(p1)))
        kids = []
        if len(p0):
            kids += build(verts[p0], sub.subgraph(p0))
        if len(p1):
            kids += build(verts[p1], sub.subgraph(p1))
        idx = _new_node(sorted_ids(verts[s]))
        for k in kids:
            nodes[k].parent = idx
        nodes[idx].children = kids
        return [idx]

    def sorted_ids(v):
        return np.sort(v)

    def _new_node(ids):
        start = len(perm)
        perm.extend(ids.tolist())
        nodes.append(TreeNode(len(nodes), start, len(perm)))
        return len(nodes) - 1

    roots = build(np.arange(n), g)
    p = Permutation(np.array(perm, dtype=np.int64))
    tree = AssemblyTree(nodes, roots, n)
    _set_levels(tree)
    symbolic_update_sets(tree, g, p)
    return p, tree


def _set_levels(tree):
    for nd in reversed(tree.nodes):
        nd.level = 0 if nd.parent < 0 else tree.nodes[nd.parent].level + 1


def symbolic_update_sets(tree: AssemblyTree, g: StructuralGraph, p: Permutation):
    """Compute every ``I^u`` from the permuted structure, folding child sets upward."""
    adj = g.adj
    inv = p.inverse
    for nd in tree.nodes:  # postorder
        olds = p.forward[nd.start:nd.stop]
        cols = [inv[adj.indices[adj.indptr[o]:adj.indptr[o + 1]]] for o in olds]
        cols += [tree.nodes[c].update for c in nd.children]
        allc = np.unique(np.concatenate(cols)) if cols else np.zeros(0, dtype=np.int64)
        nd.update = allc[allc >= nd.stop].astype(np.int64)


def reorder_separators(tree: AssemblyTree, p: Permutation, local_orders: dict):
    """Apply within-separator reorderings ``{node: order}`` to ``p`` and the update sets.

    ``order`` indexes the node's fully-summed range; the ranges stay in place.
    """
    fwd = p.forward.copy()
    remap = np.arange(len(fwd))
    for idx, order in local_orders.items():
        nd = tree.nodes[idx]
        order = np.asarray(order, dtype=np.int64)
        fwd[nd.start:nd.stop] = p.forward[nd.start + order]
        remap[nd.start + order] = nd.start + np.arange(nd.ns)
    for nd in tree.nodes:
        if nd.nu:
            nd.update = np.sort(remap[nd.update])
    return Permutation(fwd)


# --- graph nearest neighbours ------------------------------------------------

def knn_bfs(g: StructuralGraph, rows, cols, k_nn: int, chunk: int = 512):
    """For each vertex in ``rows``, up to ``k_nn`` vertices of ``cols`` nearest in BFS depth.

    Lists are ordered by depth, ties by ascending vertex index; unreachable
    columns are never listed.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.unique(np.asarray(cols, dtype=np.int64))
    out = []
    if k_nn <= 0 or len(cols) == 0:
        return [np.zeros(0, dtype=np.int64) for _ in rows]
    big = g.n + 1
    for a in range(0, len(rows), chunk):
        r = rows[a:a + chunk]
        d = csgraph.shortest_path(g.adj, unweighted=True, directed=False, indices=r)
        d = np.atleast_2d(d)[:, cols]
        reach = np.isfinite(d)
        key = np.where(reach, d, big).astype(np.int64) * (cols[-1] + 1) + cols[None, :]
        kk = min(k_nn, len(cols))
        part = np.argsort(key, axis=1, kind="stable")[:, :kk]
        for row_i in range(len(r)):
            sel = part[row_i]
            sel = sel[reach[row_i, sel]]
            out.append(cols[sel])
    return out
