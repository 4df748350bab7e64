import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfmf.interpolative import col_id, row_id


def low_rank_plus_noise(m, n, r, noise, seed, complex_=False):
    rng = np.random.default_rng(seed)

    def draw(*shape):
        x = rng.standard_normal(shape)
        return x + 1j * rng.standard_normal(shape) if complex_ else x

    M = draw(m, r) @ draw(r, n)
    return M + noise * np.linalg.norm(M) / np.sqrt(m * n) * draw(m, n)


def test_zero_matrix_rank_zero():
    f = row_id(np.zeros((4, 6)), 1e-8)
    assert f.rank == 0
    assert f.interp.shape == (4, 0)


def test_rank_one_outer_product():
    rng = np.random.default_rng(0)
    M = np.outer(rng.standard_normal(5), rng.standard_normal(8))
    f = row_id(M, 1e-10)
    assert f.rank == 1
    np.testing.assert_allclose(f.interp @ M[f.skeleton], M, rtol=1e-12, atol=1e-12 * np.abs(M).max())


def test_identity_full_rank():
    f = row_id(np.eye(4), 1e-12)
    assert f.rank == 4
    P = f.interp
    np.testing.assert_array_equal(np.sort(np.abs(P), axis=None)[-4:], np.ones(4))
    np.testing.assert_array_equal(P @ P.T, np.eye(4))


def test_col_id_is_dual_of_row_id():
    M = low_rank_plus_noise(12, 9, 4, 1e-6, seed=1)
    np.testing.assert_array_equal(col_id(M, 1e-4).skeleton, row_id(M.T, 1e-4).skeleton)


def test_col_id_rank_two():
    M = low_rank_plus_noise(10, 14, 2, 0.0, seed=2)
    f = col_id(M, 1e-10)
    assert f.rank == 2
    np.testing.assert_allclose(M[:, f.skeleton] @ f.interp.T, M, atol=1e-12 * np.abs(M).max())


def test_row_vector_picks_largest_entry():
    M = np.array([[0.5, -3.0, 2.0, 3.0]])
    f = col_id(M, 1e-12)
    assert f.rank == 1
    # |-3| and |3| tie; the lower column index wins
    np.testing.assert_array_equal(f.skeleton, [1])


def test_rank_cap():
    M = low_rank_plus_noise(20, 20, 10, 0.0, seed=3)
    assert row_id(M, 1e-12, r_max=4).rank == 4


def test_rejects_non_finite():
    M = np.ones((3, 3))
    M[1, 1] = np.nan
    with pytest.raises(ValueError):
        row_id(M, 1e-6)


def test_complex_input():
    M = low_rank_plus_noise(30, 20, 3, 0.0, seed=4, complex_=True)
    f = row_id(M, 1e-10)
    assert f.rank == 3
    np.testing.assert_allclose(f.interp @ M[f.skeleton], M, atol=1e-11 * np.abs(M).max())


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 40), n=st.integers(1, 40), r=st.integers(1, 8),
       seed=st.integers(0, 10_000), complex_=st.booleans())
def test_skeleton_rows_exact(m, n, r, seed, complex_):
    M = low_rank_plus_noise(m, n, r, 1e-3, seed, complex_)
    f = row_id(M, 1e-6)
    np.testing.assert_allclose(f.interp[f.skeleton], np.eye(f.rank), atol=0)
    approx = f.interp @ M[f.skeleton]
    np.testing.assert_allclose(approx[f.skeleton], M[f.skeleton],
                               atol=1e-13 * np.abs(M).max(), rtol=0)
    assert f.rank <= min(m, n)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), e1=st.integers(2, 10), e2=st.integers(2, 10))
def test_rank_monotone_in_eps(seed, e1, e2):
    M = low_rank_plus_noise(30, 25, 6, 1e-4, seed)
    lo, hi = sorted((10.0 ** -e1, 10.0 ** -e2))
    assert row_id(M, lo).rank >= row_id(M, hi).rank


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), r=st.integers(1, 10),
       eps=st.sampled_from([1e-2, 1e-4, 1e-6, 1e-8]))
def test_residual_bound(seed, r, eps):
    M = low_rank_plus_noise(40, 30, r, 1e-9, seed)
    f = row_id(M, eps)
    err = np.linalg.norm(M - f.interp @ M[f.skeleton])
    assert err <= 10 * eps * np.linalg.norm(M)
