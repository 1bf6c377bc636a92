"""
Steady-state heat on rectangles.

Laplace's equation on (0, l) x (0, w) with Dirichlet data: zero on the bottom
and left sides, one constant per side on the top and right. Discretised with
the 5-point stencil on the structured grid from `build_rectangle_mesh` and
solved directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from app.utils import check_range, ordered_map, spawn_streams
from .dataset import Dataset
from .errors import SolverError
from .geometry import Field, Mesh, build_rectangle_mesh

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class HeatProblemSpec:
    l: float
    w: float
    bc_top: float
    bc_right: float
    bc_bottom: float = 0.0
    bc_left: float = 0.0
    # replaces the constant top value with a profile g(x); used by analytic checks
    top_profile: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def validate(self) -> list[str]:
        flags = []
        checks = [("heat_side", self.l), ("heat_side", self.w), ("heat_bc_right", self.bc_right)]
        if self.top_profile is None:
            checks.append(("heat_bc_top", self.bc_top))
        for name, value in checks:
            ok, msg = check_range(name, value)
            if not ok and msg:
                flags.append(msg)
        return flags

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "HeatProblemSpec":
        l, w = rng.uniform(0.1, 1.0, size=2)
        top, right = rng.uniform((0.1, 0.0), (1.0, 1.0))
        return cls(l=float(l), w=float(w), bc_top=float(top), bc_right=float(right))


def boundary_values(spec: HeatProblemSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Dirichlet data on an (ny, nx) grid.

    Corners: right beats top at top-right, bottom beats right at bottom-right
    and left takes both left corners.
    """
    g = np.zeros((y.size, x.size))
    g[-1, :] = spec.top_profile(x) if spec.top_profile is not None else spec.bc_top
    g[:, -1] = spec.bc_right
    g[0, :] = spec.bc_bottom
    g[:, 0] = spec.bc_left
    return g


def solve_heat(spec: HeatProblemSpec, nx: int = 33, ny: int = 33) -> Tuple[Mesh, Field]:
    for flag in spec.validate():
        log.warning("solve_heat: %s", flag)
    if nx < 3 or ny < 3:
        raise SolverError(f"heat grid needs at least 3x3 vertices, got {nx}x{ny}")
    mesh = build_rectangle_mesh(spec.l, spec.w, nx, ny)
    x = np.linspace(0.0, spec.l, nx)
    y = np.linspace(0.0, spec.w, ny)
    hx2 = (spec.l / (nx - 1)) ** 2
    hy2 = (spec.w / (ny - 1)) ** 2
    # u_ij - cx (u_e + u_w) - cy (u_n + u_s) = 0, unit diagonal
    cx = hy2 / (2.0 * (hx2 + hy2))
    cy = hx2 / (2.0 * (hx2 + hy2))

    u = boundary_values(spec, x, y)
    mx, my = nx - 2, ny - 2
    interior = np.arange(mx * my).reshape(my, mx)

    jj, ii = np.meshgrid(np.arange(my), np.arange(mx), indexing="ij")
    k = interior.ravel()
    jj, ii = jj.ravel(), ii.ravel()

    rows, cols, vals = [k], [k], [np.ones(k.size)]
    b = np.zeros(k.size)
    for di, dj, c in ((1, 0, cx), (-1, 0, cx), (0, 1, cy), (0, -1, cy)):
        ni, nj = ii + di, jj + dj
        inside = (ni >= 0) & (ni < mx) & (nj >= 0) & (nj < my)
        rows.append(k[inside])
        cols.append(interior[nj[inside], ni[inside]])
        vals.append(np.full(int(inside.sum()), -c))
        # neighbours on the boundary move to the right-hand side (grid index = interior index + 1)
        out = ~inside
        b[k[out]] += c * u[nj[out] + 1, ni[out] + 1]
    A = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(mx * my, mx * my))

    try:
        sol = spla.spsolve(A.tocsc(), b)
    except Exception as e:  # scipy raises several types here
        raise SolverError(f"sparse solve failed: {e}") from e
    residual = float(np.max(np.abs(A @ sol - b))) if b.size else 0.0
    if not np.isfinite(residual) or residual > RESIDUAL_TOL * max(1.0, float(np.max(np.abs(b), initial=0.0))):
        raise SolverError(f"heat solve residual {residual:.3e} above tolerance")

    u[1:-1, 1:-1] = sol.reshape(my, mx)
    return mesh, Field(u.ravel(), ("u",))


def analytic_single_mode(l: float, w: float, coords: np.ndarray) -> np.ndarray:
    """sin(pi x / l) sinh(pi y / l) / sinh(pi w / l): the solution for top data sin(pi x / l), others 0."""
    x, y = coords[:, 0], coords[:, 1]
    return np.sin(np.pi * x / l) * np.sinh(np.pi * y / l) / np.sinh(np.pi * w / l)


def sample_heat_dataset(n: int, grid: Tuple[int, int], rng: np.random.Generator,
                        threads: int = 1) -> Dataset:
    if n < 1:
        raise ValueError("need at least one heat sample")
    nx, ny = grid
    streams = spawn_streams(rng, n)

    def one(r: np.random.Generator):
        return solve_heat(HeatProblemSpec.sample(r), nx, ny)

    samples = ordered_map(one, streams, threads)
    log.info("generated %d heat samples on %dx%d grids", n, nx, ny)
    return Dataset.from_samples(samples)
