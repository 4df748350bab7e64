import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from bfmf.sparse import (MatrixMarketError, Permutation, SparseMatrix, gather_pairs,
                         gather_sparse, load_matrix_market, permute_symmetric, spmv,
                         write_matrix_market)


def _write(tmp_path, text, name="a.mtx"):
    p = tmp_path / name
    p.write_text(text)
    return p


def random_sparse(n, density=0.2, seed=0, complex_=False):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=density, random_state=rng, format="csr")
    if complex_:
        A = A + 1j * sp.random(n, n, density=density, random_state=rng, format="csr")
    return SparseMatrix.from_scipy(A)


# --- Matrix Market ---------------------------------------------------------------

def test_load_identity(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n2 2 1\n")
    A = load_matrix_market(p)
    assert A.nnz == 2
    np.testing.assert_array_equal(A.data, [1.0, 1.0])


def test_load_symmetric_expands_mirror(tmp_path):
    text = ("%%MatrixMarket matrix coordinate real symmetric\n% lower triangle\n3 3 5\n"
            "1 1 2\n2 1 -1\n2 2 2\n3 2 -1\n3 3 2\n")
    A = load_matrix_market(_write(tmp_path, text))
    assert A.nnz == 7
    np.testing.assert_array_equal(A.toarray(), [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])


def test_load_sums_duplicates(tmp_path):
    text = "%%MatrixMarket matrix coordinate real general\n1 1 2\n1 1 2.0\n1 1 3.0\n"
    A = load_matrix_market(_write(tmp_path, text))
    assert A.nnz == 1
    assert A.data[0] == 5.0


def test_load_complex(tmp_path):
    text = "%%MatrixMarket matrix coordinate complex general\n2 2 2\n1 1 1.5 -2\n2 1 0 1\n"
    A = load_matrix_market(_write(tmp_path, text))
    np.testing.assert_array_equal(A.toarray(), [[1.5 - 2j, 0], [1j, 0]])


def test_load_keeps_explicit_zeros(tmp_path):
    text = "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 0\n2 2 1\n"
    assert load_matrix_market(_write(tmp_path, text)).nnz == 2


def test_load_rejects_pattern(tmp_path):
    text = "%%MatrixMarket matrix coordinate pattern general\n2 2 1\n1 1\n"
    with pytest.raises(MatrixMarketError):
        load_matrix_market(_write(tmp_path, text))


def test_parse_error_reports_line(tmp_path):
    text = "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n2 x 1\n"
    with pytest.raises(MatrixMarketError, match="line 4"):
        load_matrix_market(_write(tmp_path, text))


def test_out_of_range_entry(tmp_path):
    text = "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1\n"
    with pytest.raises(MatrixMarketError, match="line 3"):
        load_matrix_market(_write(tmp_path, text))


@pytest.mark.parametrize("complex_", [False, True])
def test_write_load_round_trip(tmp_path, complex_):
    A = random_sparse(30, seed=3, complex_=complex_)
    p = tmp_path / "rt.mtx"
    write_matrix_market(A, p, comment="round trip")
    B = load_matrix_market(p)
    np.testing.assert_array_equal(B.indptr, A.indptr)
    np.testing.assert_array_equal(B.indices, A.indices)
    np.testing.assert_array_equal(B.data, A.data)


# --- spmv, permutations, gathers --------------------------------------------------

def test_spmv_identity():
    x = np.arange(5.0)
    np.testing.assert_array_equal(spmv(SparseMatrix.from_dense(np.eye(5)), x), x)


def test_spmv_laplacian_on_ones():
    n = 6
    L = SparseMatrix.from_scipy(sp.diags([-1, 2, -1], [-1, 0, 1], shape=(n, n)))
    np.testing.assert_array_equal(spmv(L, np.ones(n)), [1, 0, 0, 0, 0, 1])


def test_spmv_matches_dense():
    A = random_sparse(50, seed=1)
    x = np.random.default_rng(2).standard_normal(50)
    np.testing.assert_allclose(spmv(A, x), A.toarray() @ x, rtol=1e-14, atol=1e-14)


def test_spmv_dimension_mismatch():
    with pytest.raises(ValueError):
        spmv(random_sparse(5), np.ones(4))


def test_csr_invariants():
    A = random_sparse(40, seed=4)
    assert np.all(np.diff(A.indptr) >= 0)
    assert A.indptr[-1] == A.nnz
    for i in range(A.nrows):
        assert np.all(np.diff(A.indices[A.indptr[i]:A.indptr[i + 1]]) > 0)


def test_permutation_validation_and_inverse():
    p = Permutation(np.array([2, 0, 1]))
    np.testing.assert_array_equal(p.forward[p.inverse], np.arange(3))
    with pytest.raises(ValueError):
        Permutation(np.array([0, 0, 1]))


def test_permute_identity_is_bitwise():
    A = random_sparse(20, seed=5)
    B = permute_symmetric(A, Permutation.identity(20))
    np.testing.assert_array_equal(B.indices, A.indices)
    np.testing.assert_array_equal(B.data, A.data)


def test_reversal_twice_is_original():
    A = random_sparse(20, seed=6)
    rev = Permutation(np.arange(20)[::-1])
    B = permute_symmetric(permute_symmetric(A, rev), rev)
    np.testing.assert_array_equal(B.toarray(), A.toarray())


def test_permute_matches_dense():
    A = random_sparse(20, seed=7)
    p = Permutation(np.random.default_rng(8).permutation(20))
    P = np.eye(20)[p.forward]
    np.testing.assert_array_equal(permute_symmetric(A, p).toarray(), P @ A.toarray() @ P.T)


def test_permute_rejects_non_square():
    A = SparseMatrix.from_dense(np.ones((2, 3)))
    with pytest.raises(ValueError):
        permute_symmetric(A, Permutation.identity(2))


def test_gather_full_and_empty():
    A = random_sparse(15, seed=9)
    np.testing.assert_array_equal(gather_sparse(A, np.arange(15), np.arange(15)), A.toarray())
    D = SparseMatrix.from_dense(np.diag(np.arange(1.0, 5.0)))
    np.testing.assert_array_equal(gather_sparse(D, [0, 1], [2, 3]), np.zeros((2, 2)))


def test_gather_single_nonzero_in_two_by_two():
    # rows {x1, x2}, cols {y1, y2}: only (x1, y2) is stored
    M = np.zeros((4, 4))
    M[0, 3] = 7.0
    A = SparseMatrix.from_dense(M)
    blk = gather_sparse(A, [0, 1], [2, 3])
    assert np.count_nonzero(blk) == 1
    assert blk[0, 1] == 7.0


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        gather_sparse(random_sparse(5), [5], [0])


def test_gather_pairs_matches_dense():
    A = random_sparse(25, seed=10, complex_=True)
    rng = np.random.default_rng(11)
    ri, ci = rng.integers(0, 25, 200), rng.integers(0, 25, 200)
    np.testing.assert_array_equal(gather_pairs(A, ri, ci), A.toarray()[ri, ci])


# --- properties ------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 25), seed=st.integers(0, 10_000))
def test_permuted_spmv_property(n, seed):
    A = random_sparse(n, density=0.3, seed=seed)
    rng = np.random.default_rng(seed)
    p = Permutation(rng.permutation(n))
    x = rng.standard_normal(n)
    lhs = spmv(permute_symmetric(A, p), x[p.forward])
    rhs = spmv(A, x)[p.forward]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-14, atol=1e-14 * (1 + np.abs(rhs).max()))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 20), cuts=st.lists(st.integers(0, 20), max_size=4),
       seed=st.integers(0, 10_000))
def test_gather_tiles_to_dense(n, cuts, seed):
    A = random_sparse(n, density=0.3, seed=seed)
    edges = sorted({0, n, *[c for c in cuts if c <= n]})
    parts = [np.arange(a, b) for a, b in zip(edges, edges[1:])]
    tiled = np.block([[gather_sparse(A, r, c) for c in parts] for r in parts])
    np.testing.assert_array_equal(tiled, A.toarray())
