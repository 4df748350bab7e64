"""Finite-difference Poisson and Helmholtz systems on regular grids.

Grid node ``(x, y[, z])`` has index ``x + kx * (y + ky * z)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sparse import SparseMatrix

MIN_PPW = 4.0


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of interior nodes; ``h`` defaults to ``1 / (max(dims) + 1)``."""

    dims: tuple
    h: float | None = None
    boundary: str = "dirichlet"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError("grids must be 2D or 3D")
        if min(dims) < 3:
            raise ValueError("every grid dimension needs at least 3 points")
        if self.boundary not in ("dirichlet", "absorbing"):
            raise ValueError(f"unknown boundary '{self.boundary}'")
        object.__setattr__(self, "dims", dims)
        if self.h is None:
            object.__setattr__(self, "h", 1.0 / (max(dims) + 1))
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def cube(cls, k, d=3, h=None, boundary="dirichlet") -> "GridSpec":
        return cls((k,) * d, h, boundary)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def index(self, location) -> int:
        loc = tuple(int(v) for v in location)
        if len(loc) != self.ndim or any(not 0 <= v < d for v, d in zip(loc, self.dims)):
            raise ValueError(f"location {location} is outside the grid {self.dims}")
        idx, stride = 0, 1
        for v, d in zip(loc, self.dims):
            idx += v * stride
            stride *= d
        return idx

    def center(self) -> tuple:
        return tuple(d // 2 for d in self.dims)


@dataclass(frozen=True)
class HelmholtzParams:
    """Visco-acoustic parameters.

    ``v``, ``rho`` and ``q`` may be per-node arrays, either flat in index
    order or shaped like ``GridSpec.dims`` (indexed ``[x, y, z]``).
    """

    omega: float = 8 * np.pi
    v: object = 4000.0
    rho: object = 1.0
    q: object = 1e4

    def spacing_for_ppw(self, ppw) -> float:
        """Grid spacing giving ``ppw`` points per (shortest) wavelength."""
        return 2 * np.pi * float(np.min(self.v)) / (self.omega * ppw)

    def ppw(self, h) -> float:
        return 2 * np.pi * float(np.min(self.v)) / (self.omega * h)


def _node_field(value, grid: GridSpec):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(grid.size, float(arr))
    if arr.shape == (grid.size,):
        return arr
    if arr.shape == grid.dims:
        return arr.ravel(order="F")
    raise ValueError("per-node coefficients must be flat or shaped like the grid dims")


def _stencil(grid: GridSpec, rho):
    """Rows, cols, values of ``-sum_i rho d_i (1/rho) d_i`` with Dirichlet ghosts.

    Also returns the number of boundary faces touching each node.
    """
    dims = grid.dims
    n = grid.size
    h2 = grid.h ** 2
    idx = np.arange(n).reshape(dims[::-1])
    inv_rho = 1.0 / rho
    diag = np.zeros(n)
    faces = np.zeros(n, dtype=np.int64)
    rows, cols, vals = [], [], []
    for axis in range(grid.ndim):
        ax = grid.ndim - 1 - axis
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        a = idx[tuple(lo)].ravel()
        b = idx[tuple(hi)].ravel()
        face = 0.5 * (inv_rho[a] + inv_rho[b])
        wa = rho[a] * face / h2
        wb = rho[b] * face / h2
        rows += [a, b]
        cols += [b, a]
        vals += [-wa, -wb]
        np.add.at(diag, a, wa)
        np.add.at(diag, b, wb)
        # ghost neighbours outside the grid carry the node's own density
        first = [slice(None)] * grid.ndim
        last = [slice(None)] * grid.ndim
        first[ax] = 0
        last[ax] = -1
        for edge in (idx[tuple(first)].ravel(), idx[tuple(last)].ravel()):
            diag[edge] += 1.0 / h2
            faces[edge] += 1
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), faces


def poisson(grid: GridSpec) -> SparseMatrix:
    """5-point (2D) or 7-point (3D) negative Laplacian with Dirichlet elimination."""
    r, c, v, _ = _stencil(grid, np.ones(grid.size))
    A = sp.coo_matrix((v, (r, c)), shape=(grid.size, grid.size)).tocsr()
    return SparseMatrix.from_scipy(A)


def helmholtz(grid: GridSpec, params: HelmholtzParams = HelmholtzParams()) -> SparseMatrix:
    """``-rho div(1/rho grad) - omega^2 / kappa^2`` with ``kappa = v (1 - i / (2q))``.

    Absorbing boundaries add ``-i (omega / v) / h`` per boundary face, the
    sign that makes the boundary dissipative under the same convention as
    the damping in ``kappa``.
    """
    ppw = params.ppw(grid.h)
    if ppw < MIN_PPW:
        raise ValueError(f"{ppw:.2f} points per wavelength is below the minimum of {MIN_PPW}")
    v = _node_field(params.v, grid)
    rho = _node_field(params.rho, grid)
    q = _node_field(params.q, grid)
    r, c, vals, faces = _stencil(grid, rho)
    vals = vals.astype(np.complex128)
    n = grid.size
    kappa = v * (1 - 1j / (2 * q))
    mass = params.omega ** 2 / kappa ** 2
    diag = -mass
    if grid.boundary == "absorbing":
        diag = diag - 1j * faces * (params.omega / v) / grid.h
    r = np.concatenate([r, np.arange(n)])
    c = np.concatenate([c, np.arange(n)])
    vals = np.concatenate([vals, diag])
    A = sp.coo_matrix((vals, (r, c)), shape=(n, n)).tocsr()
    return SparseMatrix.from_scipy(A)


def helmholtz_cube(k, ppw=15.0, params: HelmholtzParams = HelmholtzParams(), d=3,
                   boundary="absorbing") -> SparseMatrix:
    """``k^d`` Helmholtz system with spacing set from points per wavelength."""
    grid = GridSpec((k,) * d, params.spacing_for_ppw(ppw), boundary)
    return helmholtz(grid, params)


def point_source_rhs(grid: GridSpec, location=None, dtype=np.float64) -> np.ndarray:
    """Unit impulse at ``location`` (default: the grid center)."""
    if location is None:
        location = grid.center()
    b = np.zeros(grid.size, dtype=dtype)
    b[grid.index(location)] = 1.0
    return b
