"""Left-preconditioned restarted GMRES and iterative refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .multifrontal import NumericalFailure

DEFAULT_RESTART = 30
DEFAULT_MAXITER = 500


@dataclass
class IterStats:
    """Iteration history.

    For GMRES ``residuals`` are preconditioned norms ``||M^{-1}(b - A x_i)||``
    with index 0 the initial value; for refinement they are true relative
    residuals.  ``reason`` is one of ``absolute``, ``relative``, ``maxiter``,
    ``breakdown``, ``stagnation``.
    """

    iterations: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    final_residual: float = float("nan")
    cycle_starts: list = field(default_factory=list)


def _as_op(op):
    if callable(op):
        return op
    if hasattr(op, "matvec"):
        return op.matvec
    return lambda x: op @ x


def _givens(a, b):
    """Rotation ``(c, s)`` with ``[c, s; -conj(s), c] [a; b] = [r; 0]`` and real ``c``."""
    if b == 0:
        return 1.0, 0.0
    if a == 0:
        return 0.0, np.conj(b) / abs(b)
    t = np.hypot(abs(a), abs(b))
    c = abs(a) / t
    s = (a / abs(a)) * np.conj(b) / t
    return c, s


def gmres(apply_A, apply_M, b, restart: int = DEFAULT_RESTART, tol_abs: float = 1e-10,
          tol_rel: float = 1e-6, maxiter: int = DEFAULT_MAXITER):
    """Solve ``M^{-1} A x = M^{-1} b`` from ``x = 0`` with GMRES(``restart``).

    Arnoldi uses modified Gram-Schmidt.  Stops when ``||u_i|| <= tol_abs`` or
    ``||u_i|| / ||u_0|| <= tol_rel`` where ``u_i = M^{-1}(A x_i - b)``.  The
    true preconditioned residual is recomputed at every restart.
    """
    if restart < 1:
        raise ValueError("restart must be at least 1")
    A = _as_op(apply_A)
    M = _as_op(apply_M) if apply_M is not None else (lambda v: v)
    b = np.asarray(b)
    n = b.shape[0]
    # the operator may be complex even when b is real
    probe = np.asarray(A(np.zeros(n, dtype=b.dtype)))
    dtype = np.result_type(b.dtype, probe.dtype, np.float64)
    stats = IterStats()

    def check(v):
        if not np.all(np.isfinite(v)):
            raise NumericalFailure("GMRES produced a non-finite residual")
        return v

    r = check(np.asarray(M(b.astype(dtype))))
    dtype = np.result_type(dtype, r.dtype)
    x = np.zeros(n, dtype=dtype)
    u0 = float(np.linalg.norm(r))
    stats.residuals.append(u0)

    def done(res):
        if res <= tol_abs:
            return "absolute"
        if u0 > 0 and res / u0 <= tol_rel:
            return "relative"
        return ""

    beta = u0
    while True:
        reason = done(beta)
        if reason:
            stats.converged, stats.reason = True, reason
            break
        if stats.iterations >= maxiter:
            stats.reason = "maxiter"
            break
        m = min(restart, maxiter - stats.iterations)
        V = np.zeros((m + 1, n), dtype=dtype)
        H = np.zeros((m + 1, m), dtype=dtype)
        cs = np.zeros(m)
        sn = np.zeros(m, dtype=dtype)
        g = np.zeros(m + 1, dtype=dtype)
        g[0] = beta
        V[0] = r / beta
        stats.cycle_starts.append(stats.iterations)
        k = 0
        breakdown = False
        for j in range(m):
            w = check(np.asarray(M(A(V[j])), dtype=dtype))
            for i in range(j + 1):
                H[i, j] = np.vdot(V[i], w)
                w = w - H[i, j] * V[i]
            hn = float(np.linalg.norm(w))
            H[j + 1, j] = hn
            for i in range(j):
                hi, hi1 = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * hi + sn[i] * hi1
                H[i + 1, j] = -np.conj(sn[i]) * hi + cs[i] * hi1
            cs[j], sn[j] = _givens(H[j, j], H[j + 1, j])
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -np.conj(sn[j]) * g[j]
            g[j] = cs[j] * g[j]
            res = float(abs(g[j + 1]))
            if not np.isfinite(res):
                raise NumericalFailure("GMRES produced a non-finite residual")
            stats.iterations += 1
            stats.residuals.append(res)
            k = j + 1
            if hn <= 1e-14 * max(abs(H[j, j]), 1e-300):
                breakdown = True
                break
            V[j + 1] = w / hn
            if done(res):
                break
        y = np.zeros(k, dtype=dtype)
        for i in range(k - 1, -1, -1):
            y[i] = (g[i] - H[i, i + 1:k] @ y[i + 1:k]) / H[i, i]
        x = x + V[:k].T @ y
        r = check(np.asarray(M(b - A(x)), dtype=dtype))
        beta = float(np.linalg.norm(r))
        if breakdown:
            stats.converged = True
            stats.reason = done(beta) or "breakdown"
            break
    stats.final_residual = beta
    return x, stats


def iterative_refinement(A, solver, b, tol: float = 1e-12, maxsteps: int = 10):
    """Correct ``x <- x + solver(b - A x)`` until ``||b - A x|| / ||b|| <= tol``.

    Stops early with reason ``stagnation`` when a step reduces the residual by
    less than a factor 2; the best iterate seen is returned.
    """
    apply_A = _as_op(A)
    b = np.asarray(b)
    stats = IterStats()
    bn = float(np.linalg.norm(b))
    if bn == 0:
        stats.converged, stats.reason, stats.final_residual = True, "absolute", 0.0
        stats.residuals.append(0.0)
        return np.zeros_like(b, dtype=np.result_type(b.dtype, np.float64)), stats
    x = solver(b)
    best, best_res = x, np.inf
    prev = np.inf
    for step in range(maxsteps + 1):
        r = b - apply_A(x)
        rel = float(np.linalg.norm(r)) / bn
        if not np.isfinite(rel):
            raise NumericalFailure("iterative refinement produced a non-finite residual")
        stats.residuals.append(rel)
        stats.iterations = step
        if rel < best_res:
            best, best_res = x, rel
        if rel <= tol:
            stats.converged, stats.reason = True, "relative"
            break
        if rel > prev / 2:
            stats.reason = "stagnation"
            break
        if step == maxsteps:
            stats.reason = "maxiter"
            break
        prev = rel
        x = x + solver(r)
    stats.final_residual = best_res
    return best, stats
