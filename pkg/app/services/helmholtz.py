"""
Damped graph-Helmholtz problem with a localized source.

Solves (L - kappa I + i gamma kappa I) u = f on a connected graph, L the
combinatorial graph Laplacian, f a Gaussian bump centred on a vertex in the
leading fifth of the x-extent. The stored field has |u| in channel 0 and f in
channel 1; observations are taken of |u| and the inversion target is f.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from app.utils import check_range, ordered_map, spawn_streams
from .dataset import Dataset
from .errors import GraphError, SingularSystemError
from .geometry import Field, Mesh, build_random_geometric_graph

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 4.0
DEFAULT_GAMMA = 0.2
RESIDUAL_TOL = 1e-8
CHANNELS = ("u", "f")


def leading_fifth(mesh: Mesh) -> np.ndarray:
    """Vertex ids whose x coordinate lies in the first fifth of the x-extent."""
    x = mesh.coords[:, 0]
    cutoff = x.min() + 0.2 * (x.max() - x.min())
    return np.flatnonzero(x <= cutoff)


@dataclass(frozen=True, eq=False)
class HelmholtzProblemSpec:
    mesh: Mesh
    source_center: int
    kappa: float = DEFAULT_KAPPA
    gamma: float = DEFAULT_GAMMA
    source_width: float = 0.1
    source_amplitude: float = 1.0

    def __post_init__(self):
        if not 0 <= self.source_center < self.mesh.n_nodes:
            raise GraphError(f"source centre {self.source_center} is not a vertex")
        if self.source_center not in set(leading_fifth(self.mesh).tolist()):
            raise GraphError("source centre must lie in the leading fifth of the x-extent")
        if self.source_width <= 0:
            raise ValueError("source width must be positive")
        ok, msg = check_range("helmholtz_gamma", self.gamma)
        if not ok or self.gamma <= 0:
            raise ValueError(msg or "damping gamma must be positive")

    def forcing(self) -> np.ndarray:
        c = self.mesh.coords[self.source_center]
        r2 = np.sum((self.mesh.coords - c) ** 2, axis=1)
        return self.source_amplitude * np.exp(-r2 / (2.0 * self.source_width ** 2))

    def support(self, level: float = 0.1) -> np.ndarray:
        """Vertices where the bump is at least `level` of its peak."""
        c = self.mesh.coords[self.source_center]
        r2 = np.sum((self.mesh.coords - c) ** 2, axis=1)
        return np.flatnonzero(np.exp(-r2 / (2.0 * self.source_width ** 2)) >= level)

    @classmethod
    def sample(cls, mesh: Mesh, rng: np.random.Generator, kappa: float = DEFAULT_KAPPA,
               gamma: float = DEFAULT_GAMMA, width_fraction: float = 0.08,
               amplitude: Tuple[float, float] = (0.5, 1.5)) -> "HelmholtzProblemSpec":
        candidates = leading_fifth(mesh)
        x = mesh.coords[:, 0]
        return cls(mesh=mesh, source_center=int(rng.choice(candidates)), kappa=kappa, gamma=gamma,
                   source_width=width_fraction * float(x.max() - x.min() or 1.0),
                   source_amplitude=float(rng.uniform(*amplitude)))


def helmholtz_operator(mesh: Mesh, kappa: float, gamma: float) -> sps.csc_matrix:
    lap = mesh.laplacian().tocsr().astype(np.complex128)
    n = mesh.n_nodes
    shift = (-kappa + 1j * gamma * kappa) * sps.identity(n, dtype=np.complex128, format="csr")
    return (lap + shift).tocsc()


def solve_graph_helmholtz(spec: HelmholtzProblemSpec, forcing: Optional[np.ndarray] = None) -> Tuple[Mesh, Field]:
    mesh = spec.mesh
    if not mesh.is_connected():
        raise GraphError("Helmholtz problem needs a connected graph")
    f = spec.forcing() if forcing is None else np.asarray(forcing, dtype=np.float64)
    A = helmholtz_operator(mesh, spec.kappa, spec.gamma)
    try:
        u = spla.spsolve(A, f.astype(np.complex128))
    except Exception as e:
        raise SingularSystemError(spec.kappa, str(e)) from e
    u = np.atleast_1d(u)
    if not np.all(np.isfinite(u)):
        raise SingularSystemError(spec.kappa, "non-finite solution")
    residual = float(np.max(np.abs(A @ u - f), initial=0.0))
    if residual > RESIDUAL_TOL:
        raise SingularSystemError(spec.kappa, f"residual {residual:.3e}")
    return mesh, Field(np.column_stack([np.abs(u), f]), CHANNELS)


def sample_helmholtz_dataset(n: int, n_nodes: int, rng: np.random.Generator,
                             kappa: float = DEFAULT_KAPPA, gamma: float = DEFAULT_GAMMA,
                             k_neighbors: int = 5, threads: int = 1) -> Tuple[Dataset, list]:
    """n random graphs with one bump each. Returns the dataset and the problem specs."""
    if n < 1:
        raise ValueError("need at least one Helmholtz sample")
    streams = spawn_streams(rng, n)

    def one(r: np.random.Generator):
        mesh = build_random_geometric_graph(n_nodes, r, k=k_neighbors)
        spec = HelmholtzProblemSpec.sample(mesh, r, kappa=kappa, gamma=gamma)
        return spec, solve_graph_helmholtz(spec)

    out = ordered_map(one, streams, threads)
    log.info("generated %d Helmholtz samples on %d-node graphs", n, n_nodes)
    return Dataset.from_samples([s for _, s in out]), [spec for spec, _ in out]
