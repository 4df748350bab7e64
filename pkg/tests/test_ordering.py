import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csgraph

from bfmf.ordering import (BALANCE, StructuralGraph, balanced_partition, bisect_graph,
                           knn_bfs, nested_dissection, separator_hierarchy)
from bfmf.problems import GridSpec, poisson


def path_graph(n):
    return StructuralGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def grid_graph(dims):
    return StructuralGraph.from_matrix(poisson(GridSpec(dims)))


def no_cross_edges(g, a, b):
    return g.adj[a][:, b].nnz == 0


# --- structural graph --------------------------------------------------------------

def test_graph_is_symmetric_without_loops():
    g = StructuralGraph.from_edges(4, [(0, 1), (1, 1), (2, 3)])
    assert (g.adj != g.adj.T).nnz == 0
    assert g.adj.diagonal().sum() == 0
    np.testing.assert_array_equal(g.neighbors(1), [0])


def test_reach_subgraph_joins_distance_two():
    g = path_graph(5)
    sub = g.reach_subgraph([0, 2, 4])
    # 0-2 and 2-4 are two hops apart through eliminated vertices; 0-4 is not
    np.testing.assert_array_equal(sub.adj.toarray(), [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


# --- bisection ---------------------------------------------------------------------

def test_bisect_disconnected_cliques():
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    edges += [(i + 4, j + 4) for i, j in edges]
    p0, p1, s = bisect_graph(StructuralGraph.from_edges(8, edges))
    assert len(s) == 0 and len(p0) == len(p1) == 4


def test_bisect_grid_4x4():
    g = grid_graph((4, 4))
    p0, p1, s = bisect_graph(g)
    assert len(s) == 4
    assert len(p0) == len(p1) == 6
    assert no_cross_edges(g, p0, p1)


def test_bisect_star_takes_center():
    star = StructuralGraph.from_edges(7, [(0, i) for i in range(1, 7)])
    _, _, s = bisect_graph(star)
    np.testing.assert_array_equal(s, [0])


def test_bisect_empty_graph():
    with pytest.raises(ValueError):
        bisect_graph(StructuralGraph.from_edges(0, []))


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(3, 9), ny=st.integers(3, 9), nz=st.integers(3, 5))
def test_bisect_property(nx, ny, nz):
    g = grid_graph((nx, ny, nz))
    p0, p1, s = bisect_graph(g)
    n = g.n
    assert sorted(np.concatenate([p0, p1, s]).tolist()) == list(range(n))
    assert no_cross_edges(g, p0, p1)
    assert abs(len(p0) - len(p1)) <= max(1, BALANCE * n)


# --- nested dissection ---------------------------------------------------------------

def test_nd_path_of_seven():
    p, tree = nested_dissection(path_graph(7), leaf_size=3)
    root = tree.nodes[tree.roots[0]]
    np.testing.assert_array_equal(p.forward[root.start:root.stop], [3])
    leaves = [tree.nodes[c] for c in root.children]
    assert [nd.ns for nd in leaves] == [3, 3]


def test_nd_small_graph_is_single_node():
    p, tree = nested_dissection(path_graph(5), leaf_size=8)
    assert len(tree.nodes) == 1
    np.testing.assert_array_equal(p.forward, np.arange(5))


def test_nd_rejects_empty():
    with pytest.raises(ValueError):
        nested_dissection(StructuralGraph.from_edges(0, []))


def test_nd_forest_for_disconnected_graph():
    edges = [(i, i + 1) for i in range(9)] + [(i + 10, i + 11) for i in range(9)]
    p, tree = nested_dissection(StructuralGraph.from_edges(20, edges), leaf_size=4)
    tree.check()
    assert len(tree.roots) == 2


@settings(max_examples=20, deadline=None)
@given(dims=st.sampled_from([(5, 5), (9, 7), (12, 12), (4, 4, 4), (6, 5, 4), (8, 8, 8)]),
       leaf=st.integers(2, 40))
def test_assembly_tree_invariants(dims, leaf):
    g = grid_graph(dims)
    p, tree = nested_dissection(g, leaf)
    tree.check()
    assert len(np.unique(p.forward)) == g.n
    for nd in tree.nodes:
        for c in nd.children:
            assert tree.nodes[c].stop <= nd.start  # children before parents
        assert np.all(np.diff(nd.update) > 0)
        assert np.all(nd.update >= nd.stop)


def test_update_sets_match_elimination_fill():
    # I^u of a node is exactly the set of later indices its subtree couples to
    g = grid_graph((6, 6))
    p, tree = nested_dissection(g, 4)
    A = g.adj.toarray()[np.ix_(p.forward, p.forward)] != 0
    n = len(A)
    filled = A | np.eye(n, dtype=bool)
    for k in range(n):  # symbolic Gaussian elimination
        rows = np.flatnonzero(filled[k + 1:, k]) + k + 1
        filled[np.ix_(rows, rows)] = True
    for nd in tree.nodes:
        last = nd.stop - 1
        reach = np.flatnonzero(filled[nd.stop:, nd.start:nd.stop].any(axis=1)) + nd.stop
        np.testing.assert_array_equal(nd.update, reach, err_msg=f"node {nd.index}, last {last}")


# --- hierarchies -----------------------------------------------------------------------

def test_hierarchy_small_separator_is_leaf_only():
    h = separator_hierarchy(path_graph(10), np.arange(10), leaf_size=16)
    assert h.levels == 0
    assert h.leaves() == [(0, 10)]


def test_hierarchy_path_of_sixteen():
    h = separator_hierarchy(path_graph(16), np.arange(16), leaf_size=2)
    assert h.levels + 1 == 4
    for l in range(h.levels + 1):
        assert len(h.offsets[l]) - 1 == 2 ** l


def test_hierarchy_leaves_connected_on_planar_separator():
    dims = (9, 9, 9)
    g = grid_graph(dims)
    plane = np.array([x + 9 * y + 81 * 4 for y in range(9) for x in range(9)])
    h = separator_hierarchy(g, plane, leaf_size=10)
    sub = g.subgraph(plane)
    for a, b in h.leaves():
        part = h.order[a:b]
        ncomp, _ = csgraph.connected_components(sub.subgraph(part).adj, directed=False)
        assert ncomp == 1


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 200), leaf=st.integers(1, 40))
def test_hierarchy_leaves_tile(n, leaf):
    g = path_graph(max(n, 2)) if n > 1 else StructuralGraph.from_edges(1, [])
    h = separator_hierarchy(g, np.arange(n), leaf)
    np.testing.assert_array_equal(np.sort(h.order), np.arange(n))
    leaves = h.leaves()
    assert leaves[0][0] == 0 and leaves[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(leaves, leaves[1:]))
    for l in range(h.levels):
        np.testing.assert_array_equal(h.offsets[l], h.offsets[l + 1][::2])


def test_balanced_partition_subtree_and_truncate():
    h = balanced_partition(100, 10)
    assert h.levels == 4
    t = h.truncate(2)
    assert t.levels == 2
    np.testing.assert_array_equal(t.offsets[2], h.offsets[2])
    s = h.subtree(1, 1)
    assert s.n == 50 and s.levels == 3
    assert s.offsets[0][0] == 0


# --- nearest neighbours ---------------------------------------------------------------

def test_knn_self_is_nearest():
    out = knn_bfs(path_graph(5), [2], np.arange(5), 1)
    np.testing.assert_array_equal(out[0], [2])


def test_knn_path_depths():
    out = knn_bfs(path_graph(5), [0], [2, 3, 4], 2)
    np.testing.assert_array_equal(out[0], [2, 3])


def test_knn_unreachable_is_empty():
    g = StructuralGraph.from_edges(4, [(0, 1), (2, 3)])
    assert len(knn_bfs(g, [0], [2, 3], 3)[0]) == 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), k=st.integers(1, 12))
def test_knn_property(seed, k):
    g = grid_graph((7, 6))
    rng = np.random.default_rng(seed)
    rows = rng.choice(g.n, 5, replace=False)
    cols = np.sort(rng.choice(g.n, 15, replace=False))
    d = csgraph.shortest_path(g.adj, unweighted=True, directed=False, indices=rows)
    for r, lst in enumerate(knn_bfs(g, rows, cols, k)):
        assert len(lst) == min(k, len(cols))
        assert np.all(np.isin(lst, cols))
        depth = d[r, lst]
        assert np.all(np.diff(depth) >= 0)
        # no omitted column is strictly closer than the farthest listed one
        rest = np.setdiff1d(cols, lst)
        if len(rest):
            assert d[r, rest].min() >= depth.max()
