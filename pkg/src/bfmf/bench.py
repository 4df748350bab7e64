"""Benchmark driver: build a system, factor, solve and fill a :class:`SolveReport`."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .counters import FlopCounter, gemm_flops, scalar_factor
from .hodbf import SingularBlockError
from .krylov import gmres, iterative_refinement
from .multifrontal import (NumericalFailure, SolverOptions, analyze, dense_front_memory, factor,
                           top_fronts)
from .problems import GridSpec, HelmholtzParams, helmholtz, point_source_rhs, poisson
from .report import SolveReport, loglog_slope, percent
from .sparse import SparseMatrix, load_matrix_market

PROBLEMS = ("poisson2d", "poisson3d", "helmholtz2d", "helmholtz3d")
RHS_KINDS = ("ones", "point-center", "random")
# refinement that stagnates below this relative residual still counts as solved
EXACT_ACCEPT = 1e-10


class ConfigError(ValueError):
    """Invalid combination of run settings."""


@dataclass(frozen=True)
class RunConfig:
    problem: str | None = None
    matrix: str | None = None
    k: int = 16
    ppw: float = 15.0
    omega: float = 8 * math.pi
    rhs: str | None = None
    solver: str = "exact"
    eps: float = 1e-3
    n_min: int = 1000
    alpha: float = 2.0
    k_nn: int = 16
    seed: int = 0
    restart: int = 30
    tol_abs: float = 1e-10
    tol_rel: float = 1e-6
    maxiter: int = 500
    refine_tol: float = 1e-12
    top_k: int = 5

    @property
    def generator(self) -> str | None:
        """The grid problem to build; Poisson 3D when neither source is given."""
        if self.problem is None and self.matrix is None:
            return "poisson3d"
        return self.problem

    def describe(self) -> str:
        if self.matrix:
            return f"matrix:{self.matrix}"
        if self.generator.startswith("helmholtz"):
            return f"{self.generator}(k={self.k},ppw={self.ppw:g},omega={self.omega:g})"
        return f"{self.generator}(k={self.k})"

    def rhs_kind(self) -> str:
        if self.rhs:
            return self.rhs
        g = self.generator
        return "point-center" if g and g.startswith("helmholtz") else "ones"

    def solver_options(self) -> SolverOptions:
        return SolverOptions(kind=self.solver, eps=self.eps, n_min=self.n_min, alpha=self.alpha,
                             k_nn=self.k_nn, seed=self.seed)


def build_system(cfg: RunConfig):
    """Return ``(A, grid or None)``; raises :class:`ConfigError` on bad settings."""
    if cfg.matrix is not None:
        if cfg.problem is not None:
            raise ConfigError("give either a problem or a matrix file, not both")
        try:
            return load_matrix_market(cfg.matrix), None
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load {cfg.matrix}: {exc}") from exc
    problem = cfg.generator
    if problem not in PROBLEMS:
        raise ConfigError(f"unknown problem '{problem}'")
    d = 2 if problem.endswith("2d") else 3
    try:
        if problem.startswith("poisson"):
            grid = GridSpec.cube(cfg.k, d)
            return poisson(grid), grid
        params = HelmholtzParams(omega=cfg.omega)
        grid = GridSpec.cube(cfg.k, d, params.spacing_for_ppw(cfg.ppw), "absorbing")
        return helmholtz(grid, params), grid
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_rhs(cfg: RunConfig, A: SparseMatrix, grid) -> np.ndarray:
    kind = cfg.rhs_kind()
    dtype = np.result_type(A.dtype, np.float64)
    if kind == "ones":
        return np.ones(A.nrows, dtype=dtype)
    if kind == "random":
        return np.random.default_rng(cfg.seed).standard_normal(A.nrows).astype(dtype)
    if kind == "point-center":
        if grid is None:
            raise ConfigError("point-center right-hand side needs a grid problem")
        return point_source_rhs(grid, dtype=dtype)
    raise ConfigError(f"unknown right-hand side '{kind}'")


def exact_flops(tree, dtype) -> int:
    """Flops of a dense factorization (with extend-add) on the same assembly tree."""
    total = 0
    for nd in tree.nodes:
        ns, nu = nd.ns, nd.nu
        total += 2 * ns ** 3 // 3 + 2 * ns * ns * nu + gemm_flops(nu, ns, nu)
        total += sum(tree.nodes[c].nu ** 2 for c in nd.children)
    return total * scalar_factor(dtype)


def _validate(cfg: RunConfig):
    if cfg.solver not in ("exact", "hodbf"):
        raise ConfigError(f"unknown solver '{cfg.solver}'")
    if cfg.rhs_kind() not in RHS_KINDS:
        raise ConfigError(f"unknown right-hand side '{cfg.rhs_kind()}'")
    if cfg.restart < 1 or cfg.maxiter < 1:
        raise ConfigError("GMRES restart and maxiter must be positive")
    try:
        cfg.solver_options()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run(cfg: RunConfig) -> SolveReport:
    """Order, factor, solve; numerical failures are recorded in the report.

    Raises :class:`ConfigError` for invalid settings.
    """
    _validate(cfg)
    A, grid = build_system(cfg)
    b = build_rhs(cfg, A, grid)
    opts = cfg.solver_options()
    rep = SolveReport(problem=cfg.describe(), n=A.nrows, nnz=A.nnz, solver=cfg.solver,
                      eps=cfg.eps if cfg.solver == "hodbf" else None,
                      n_min=int(cfg.n_min) if cfg.solver == "hodbf" else None,
                      seed=cfg.seed, rhs=cfg.rhs_kind())
    try:
        t0 = time.perf_counter()
        ana = analyze(A, opts)
        rep.analysis_time_s = time.perf_counter() - t0
        F = factor(A, opts, ana)
    except (NumericalFailure, SingularBlockError, np.linalg.LinAlgError) as exc:
        rep.status, rep.error = "failed", f"{type(exc).__name__}: {exc}"
        return rep
    rep.factor_time_s = F.factor_time_s
    rep.factor_flops = F.flops.total
    rep.factor_flops_by_phase = F.flops.as_dict()
    rep.exact_factor_flops = exact_flops(ana.tree, F.dtype)
    rep.flop_compression_pct = percent(rep.factor_flops, rep.exact_factor_flops)
    rep.factor_memory_units = F.memory
    rep.exact_memory_units = int(sum(dense_front_memory(nd) for nd in ana.tree.nodes))
    rep.mem_compression_pct = percent(rep.factor_memory_units, rep.exact_memory_units)
    rep.compressed_fronts = len(F.compressed_nodes)
    rep.max_rank = F.max_rank
    root = max((ana.tree.nodes[r] for r in ana.tree.roots), key=lambda nd: nd.dim)
    rep.root_front_dim = root.dim
    rep.root_max_rank = F.fronts[root.index].max_rank
    rep.top_fronts = top_fronts(F, cfg.top_k)
    counter = FlopCounter()
    t0 = time.perf_counter()
    try:
        if cfg.solver == "exact":
            x, stats = iterative_refinement(A.scipy, lambda r: F.solve(r, counter), b,
                                            tol=cfg.refine_tol)
            rep.refinement_steps = stats.iterations
            ok = stats.converged or stats.final_residual <= EXACT_ACCEPT
        else:
            x, stats = gmres(A.scipy, lambda r: F.solve(r, counter), b, restart=cfg.restart,
                             tol_abs=cfg.tol_abs, tol_rel=cfg.tol_rel, maxiter=cfg.maxiter)
            rep.gmres_iterations = stats.iterations
            ok = stats.converged
    except NumericalFailure as exc:
        rep.status, rep.error = "failed", f"{type(exc).__name__}: {exc}"
        return rep
    rep.solve_time_s = time.perf_counter() - t0
    rep.solve_flops = counter.total
    bn = float(np.linalg.norm(b))
    rep.relative_residual = float(np.linalg.norm(b - A.scipy @ x)) / bn if bn else 0.0
    if not ok:
        rep.status = "not_converged"
        rep.error = f"stopped: {stats.reason}"
    return rep


def sweep(cfg: RunConfig, ks) -> tuple:
    """One report per ``k`` (sizes must increase); slopes need at least two good rows."""
    ks = [int(k) for k in ks]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigError("sweep sizes must be strictly increasing")
    reports = []
    for k in ks:
        c = replace(cfg, k=k)
        try:
            reports.append(run(c))
        except ConfigError as exc:
            reports.append(SolveReport(problem=c.describe(), n=0, nnz=0, solver=c.solver,
                                       seed=c.seed, rhs=c.rhs_kind(), status="failed",
                                       error=f"ConfigError: {exc}"))
    return reports, sweep_slopes(reports)


def sweep_slopes(reports) -> dict | None:
    good = [r for r in reports if r.status != "failed"]
    if len(good) < 2:
        return None
    N = [r.n for r in good]
    return {
        "factor_flops_vs_N": loglog_slope(N, [r.factor_flops for r in good]),
        "memory_vs_N": loglog_slope(N, [r.factor_memory_units for r in good]),
        "max_rank_vs_N": loglog_slope(N, [r.max_rank for r in good]),
        "root_rank_vs_root_dim": loglog_slope([r.root_front_dim for r in good],
                                              [r.root_max_rank for r in good]),
    }
