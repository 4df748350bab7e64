"""Dense brute-force references shared by the test suite.

Everything here is textbook linear algebra on dense arrays so that results
can be trusted independently of the compressed code paths.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
from scipy.special import hankel1


# --- dense factorizations ------------------------------------------------------

def dense_lu_solve(A, b):
    """Partial-pivoted LU solve of a dense system."""
    A = np.asarray(A)
    return sla.lu_solve(sla.lu_factor(A), np.asarray(b))


def dense_extend_add(sparse_block, children):
    """Scatter-sum ``sparse_block + sum_k extend(CB_k)``.

    ``children`` holds ``(cb, positions)`` where ``positions[i]`` is the row
    and column of the front that entry ``i`` of ``cb`` lands on.
    """
    F = np.array(sparse_block, dtype=np.result_type(sparse_block, np.float64), copy=True)
    for cb, pos in children:
        cb = np.asarray(cb)
        for a, pa in enumerate(pos):
            for b, pb in enumerate(pos):
                F[pa, pb] += cb[a, b]
    return F


def dense_schur(F, ns):
    """``F22 - F21 F11^{-1} F12`` for the leading ``ns`` x ``ns`` pivot block."""
    F = np.asarray(F)
    F11, F12 = F[:ns, :ns], F[:ns, ns:]
    F21, F22 = F[ns:, :ns], F[ns:, ns:]
    return F22 - F21 @ np.linalg.solve(F11, F12)


def dense_woodbury(U, V):
    """``(I + U V^T)^{-1}`` via the Woodbury identity."""
    U, V = np.asarray(U), np.asarray(V)
    k = U.shape[1]
    core = np.linalg.inv(np.eye(k) + V.T @ U)
    return np.eye(U.shape[0]) - U @ core @ V.T


def sherman_morrison(u, v):
    """``(I + u v^T)^{-1}`` for vectors."""
    u, v = np.asarray(u), np.asarray(v)
    return np.eye(len(u)) - np.outer(u, v) / (1.0 + v @ u)


def front_reference(A_dense, sep, update, children):
    """Dense front of a node by the definition of extend-add.

    ``children`` holds ``(cb, child_update)`` with global (permuted) indices.
    """
    idx = np.concatenate([sep, update]).astype(int)
    ns = len(sep)
    block = np.zeros((len(idx), len(idx)), dtype=np.result_type(A_dense, np.float64))
    block[:ns, :] = A_dense[np.ix_(idx[:ns], idx)]
    block[ns:, :ns] = A_dense[np.ix_(idx[ns:], idx[:ns])]
    where = {g: k for k, g in enumerate(idx)}
    return dense_extend_add(block, [(cb, [where[g] for g in cu]) for cb, cu in children])


def exact_schur_complements(A_dense, tree):
    """Contribution block of every node of an assembly tree, computed densely.

    The CB of node ``tau`` is ``-A[U, S] A[S, S]^{-1} A[S, U]`` where ``S`` is
    the subtree of ``tau`` and ``U`` its update set. ``A[U, U]`` itself is left
    out because an ancestor gathers it from the sparse matrix.
    """
    cbs = {}
    for nd in tree.nodes:
        sub = _subtree_indices(tree, nd.index)
        U = nd.update
        if len(U) == 0:
            continue
        A11 = A_dense[np.ix_(sub, sub)]
        cbs[nd.index] = -A_dense[np.ix_(U, sub)] @ np.linalg.solve(A11, A_dense[np.ix_(sub, U)])
    return cbs


def _subtree_indices(tree, node):
    out, stack = [], [node]
    while stack:
        nd = tree.nodes[stack.pop()]
        out.extend(range(nd.start, nd.stop))
        stack.extend(nd.children)
    return np.sort(np.array(out, dtype=int))


# --- kernels -------------------------------------------------------------------

def oscillatory_1d(n, seed=0):
    """``exp(2 pi i x_i y_j)`` with sorted random ``x`` in [0, 1) and ``y`` in [0, n)."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 1.0, n))
    y = np.sort(rng.uniform(0.0, n, n))
    return np.exp(2j * np.pi * np.outer(x, y))


def green_segments(n, ppw=8.0):
    """2D Helmholtz Green's function between two parallel unit segments one unit apart.

    ``n`` points per segment; the wavenumber keeps ``ppw`` points per wavelength.
    """
    t = (np.arange(n) + 0.5) / n
    kappa = 2 * np.pi * n / ppw
    r = np.sqrt((t[:, None] - t[None, :]) ** 2 + 1.0)
    return 0.25j * hankel1(0, kappa * r)


def random_butterfly_kernel(n, terms=3, seed=0):
    """Sum of randomly modulated Fourier integral operators.

    Each term ``diag(a) exp(2 pi i c x y^T) diag(b)`` is complementary low
    rank, and so is a short sum of them.
    """
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 1.0, n))
    y = np.sort(rng.uniform(0.0, n, n))
    K = np.zeros((n, n), dtype=np.complex128)
    for _ in range(terms):
        c = rng.uniform(0.5, 1.0)
        a = 1.0 + 0.5 * np.cos(2 * np.pi * (x * rng.integers(1, 4) + rng.uniform()))
        b = 1.0 + 0.5 * np.sin(2 * np.pi * (y / n * rng.integers(1, 4) + rng.uniform()))
        K += a[:, None] * np.exp(2j * np.pi * c * np.outer(x, y)) * b[None, :]
    return K


def smooth_kernel(n, seed=0):
    """Real ``1 / (1 + |x_i - x_j|)`` on sorted random points; numerically low rank off the diagonal."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 1.0, n))
    return 1.0 / (1.0 + 8.0 * np.abs(x[:, None] - x[None, :]))


def rel_fro(A, B):
    A, B = np.asarray(A), np.asarray(B)
    nb = np.linalg.norm(B)
    return np.linalg.norm(A - B) / nb if nb else np.linalg.norm(A - B)
