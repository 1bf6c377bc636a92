"""
Meshes, fields, graph operators and observation operators.

A mesh is an undirected attributed graph: vertex coordinates plus an edge
list. Graph operators (normalized adjacency for the GCN layers, combinatorial
Laplacian for the graph GP and the Helmholtz generator) are built from it and
cached on the mesh instance.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence

import numpy as np
import scipy.sparse as sps
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from app.config import settings
from .errors import GraphError, ObservationIndexError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Mesh:
    coords: np.ndarray                     # (N, d)
    edges: np.ndarray                      # (E, 2) undirected pairs
    boundary: Optional[np.ndarray] = None  # (N,) bool
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] < 1:
            raise GraphError(f"coords must be (N, d) with N >= 1, got {coords.shape}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = coords.shape[0]
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise GraphError(f"edge index out of range [0, {n})")
        if edges.size and np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed in the stored edge list")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "edges", edges)
        if self.boundary is not None:
            b = np.asarray(self.boundary, dtype=bool).reshape(-1)
            if b.shape[0] != n:
                raise GraphError("boundary flags must have one entry per vertex")
            object.__setattr__(self, "boundary", b)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def edge_lengths(self) -> np.ndarray:
        d = self.coords[self.edges[:, 0]] - self.coords[self.edges[:, 1]]
        return np.linalg.norm(d, axis=1)

    def is_connected(self) -> bool:
        if self.n_nodes == 1:
            return True
        n_comp, _ = connected_components(self._pattern(np.ones(self.n_edges)), directed=False)
        return n_comp == 1

    def permuted(self, perm: Sequence[int]) -> "Mesh":
        """Relabel vertices so that new vertex k is old vertex perm[k]."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        boundary = None if self.boundary is None else self.boundary[perm]
        return Mesh(self.coords[perm], inverse[self.edges], boundary)

    def digest(self) -> str:
        """Content hash over coordinates and edges."""
        if "digest" not in self._cache:
            h = hashlib.sha256(str(self.coords.shape).encode())
            h.update(self.coords.tobytes())
            h.update(self.edges.tobytes())
            self._cache["digest"] = h.hexdigest()
        return self._cache["digest"]

    def adjacency(self) -> "GraphOperator":
        if "adjacency" not in self._cache:
            self._cache["adjacency"] = normalized_adjacency(self)
        return self._cache["adjacency"]

    def laplacian(self) -> "GraphOperator":
        if "laplacian" not in self._cache:
            self._cache["laplacian"] = graph_laplacian(self)
        return self._cache["laplacian"]

    def _pattern(self, weights: np.ndarray) -> sps.csr_matrix:
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        a = sps.coo_matrix((np.concatenate([weights, weights]),
                            (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
        return a.tocsr()


@dataclass(frozen=True)
class Field:
    values: np.ndarray                 # (N, d_u)
    channel_names: tuple = ("u",)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[1] != len(self.channel_names):
            raise ValueError(f"{v.shape[1]} channels but {len(self.channel_names)} names")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", np.ascontiguousarray(v))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def channel(self, name_or_index) -> np.ndarray:
        k = self.channel_names.index(name_or_index) if isinstance(name_or_index, str) else name_or_index
        return self.values[:, k]


@dataclass(frozen=True)
class ObservationOperator:
    """Selects `node_ids` of one field channel and adds N(0, sigma^2) noise."""
    node_ids: tuple
    channel: int = 0
    sigma: float = 0.0

    def __post_init__(self):
        ids = tuple(int(i) for i in self.node_ids)
        if len(set(ids)) != len(ids):
            raise ObservationIndexError("observed node ids must be distinct")
        if any(i < 0 for i in ids):
            raise ObservationIndexError("observed node ids must be non-negative")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        object.__setattr__(self, "node_ids", ids)

    @property
    def size(self) -> int:
        return len(self.node_ids)

    def check(self, n_nodes: int, n_channels: int) -> None:
        if self.node_ids and max(self.node_ids) >= n_nodes:
            raise ObservationIndexError(f"node id {max(self.node_ids)} out of range for {n_nodes} nodes")
        if not 0 <= self.channel < n_channels:
            raise ObservationIndexError(f"channel {self.channel} out of range for {n_channels} channels")

    def select(self, values: np.ndarray) -> np.ndarray:
        """H applied to (N, d_u) or batched (B, N, d_u) field values."""
        idx = np.asarray(self.node_ids, dtype=np.int64)
        return values[..., idx, self.channel]

    def with_sigma(self, sigma: float) -> "ObservationOperator":
        return ObservationOperator(self.node_ids, self.channel, sigma)


@dataclass(frozen=True)
class GraphOperator:
    kind: Literal["normalized-adjacency", "laplacian"]
    matrix: object      # dense ndarray, or CSR for meshes above the dense limit
    weighting: str

    @property
    def is_sparse(self) -> bool:
        return sps.issparse(self.matrix)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else np.asarray(self.matrix)

    def tocsr(self) -> sps.csr_matrix:
        return sps.csr_matrix(self.matrix)


def _dense_or_sparse(m: sps.csr_matrix, n: int):
    return m if n > settings.dense_node_limit else m.toarray()


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_rectangle_mesh(l: float, w: float, nx: int, ny: int) -> Mesh:
    """Structured nx*ny grid over [0, l] x [0, w] with 4-neighbour edges. Vertex k = j*nx + i."""
    if l <= 0 or w <= 0:
        raise GraphError(f"rectangle sides must be positive, got l={l}, w={w}")
    if nx < 2 or ny < 2:
        raise GraphError(f"need at least 2 vertices per side, got nx={nx}, ny={ny}")
    xs = np.linspace(0.0, l, nx)
    ys = np.linspace(0.0, w, ny)
    X, Y = np.meshgrid(xs, ys)
    coords = np.column_stack([X.ravel(), Y.ravel()])

    idx = np.arange(nx * ny).reshape(ny, nx)
    horizontal = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    vertical = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    edges = np.vstack([horizontal, vertical])

    boundary = np.zeros((ny, nx), dtype=bool)
    boundary[0, :] = boundary[-1, :] = True
    boundary[:, 0] = boundary[:, -1] = True
    return Mesh(coords, edges, boundary.ravel())


def build_random_geometric_graph(n: int, rng: np.random.Generator, k: int = 5,
                                 extent: tuple = (1.0, 0.4)) -> Mesh:
    """k-nearest-neighbour graph over n uniform points in a box, joined into one component."""
    if n < 2:
        raise GraphError("a random geometric graph needs at least 2 vertices")
    pts = rng.uniform(0.0, 1.0, size=(n, 2)) * np.asarray(extent, dtype=np.float64)
    tree = cKDTree(pts)
    kk = min(k + 1, n)
    _, nbrs = tree.query(pts, k=kk)
    pairs = {(min(a, b), max(a, b)) for a in range(n) for b in np.atleast_1d(nbrs[a])[1:]}

    mesh = Mesh(pts, np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2))
    n_comp, labels = connected_components(mesh._pattern(np.ones(mesh.n_edges)), directed=False)
    while n_comp > 1:
        # bridge component 0 to its nearest foreign vertex
        inside = np.flatnonzero(labels == 0)
        outside = np.flatnonzero(labels != 0)
        d = np.linalg.norm(pts[inside, None, :] - pts[None, outside, :], axis=2)
        a, b = np.unravel_index(np.argmin(d), d.shape)
        pairs.add((min(inside[a], outside[b]), max(inside[a], outside[b])))
        mesh = Mesh(pts, np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2))
        n_comp, labels = connected_components(mesh._pattern(np.ones(mesh.n_edges)), directed=False)
    return mesh


# ---------------------------------------------------------------------------
# graph operators
# ---------------------------------------------------------------------------

def normalized_adjacency(mesh: Mesh) -> GraphOperator:
    """D^-1/2 (A_w + I) D^-1/2 with a_ij = 1 / (1 + |x_i - x_j|) on mesh edges."""
    if not mesh.is_connected():
        log.warning("normalized_adjacency: mesh with %d nodes is disconnected", mesh.n_nodes)
    n = mesh.n_nodes
    weights = 1.0 / (1.0 + mesh.edge_lengths())
    a = mesh._pattern(weights) + sps.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    d = sps.diags(1.0 / np.sqrt(deg))
    a_hat = (d @ a @ d).tocsr()
    return GraphOperator("normalized-adjacency", _dense_or_sparse(a_hat, n), "inverse-distance-1p")


def graph_laplacian(mesh: Mesh) -> GraphOperator:
    """Combinatorial Laplacian D - A with unit edge weights."""
    n = mesh.n_nodes
    a = mesh._pattern(np.ones(mesh.n_edges))
    # duplicate edges would otherwise be double-counted
    a.data[:] = 1.0
    deg = np.asarray(a.sum(axis=1)).ravel()
    lap = (sps.diags(deg) - a).tocsr()
    return GraphOperator("laplacian", _dense_or_sparse(lap, n), "unit")


# ---------------------------------------------------------------------------
# observation model y = H u + xi
# ---------------------------------------------------------------------------

def apply_observation(op: ObservationOperator, field: Field, rng: np.random.Generator) -> np.ndarray:
    op.check(field.n_nodes, field.n_channels)
    clean = op.select(field.values)
    if op.sigma == 0.0:
        return clean.copy()
    return clean + op.sigma * rng.standard_normal(op.size)


def random_observation(n_nodes: int, count: int, rng: np.random.Generator, channel: int = 0,
                       sigma: float = 0.0, candidates: Optional[np.ndarray] = None) -> ObservationOperator:
    """Uniformly random distinct observation locations (optionally restricted to `candidates`)."""
    pool = np.arange(n_nodes) if candidates is None else np.asarray(candidates, dtype=np.int64)
    count = min(count, pool.size)
    ids = np.sort(rng.choice(pool, size=count, replace=False))
    return ObservationOperator(tuple(int(i) for i in ids), channel, sigma)


def inverse_count_draw(rng: np.random.Generator, n_min: int = 5, n_max: int = 50) -> int:
    """Number of observation locations with P(n) proportional to 1/n on [n_min, n_max]."""
    counts = np.arange(n_min, n_max + 1)
    p = 1.0 / counts
    return int(rng.choice(counts, p=p / p.sum()))


def stack_observations(ops: List[ObservationOperator], values: np.ndarray) -> np.ndarray:
    """Concatenate H_k u over several operators (multi-channel observation)."""
    return np.concatenate([op.select(values) for op in ops], axis=-1)
