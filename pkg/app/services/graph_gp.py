"""
Gaussian-process regression on graphs with spectral Matern / RBF kernels.

    K = sigma_f^2 * c * V f(Lambda) V^T
    f(lam) = (2 nu / l^2 + lam)^(-nu)    Matern, nu in {1/2, 3/2}
    f(lam) = exp(-l^2 lam / 2)           RBF

with (Lambda, V) the eigendecomposition of the unit-weight graph Laplacian and
c chosen so the mean prior variance is sigma_f^2. Hyperparameters are picked by
maximising the log marginal likelihood over a grid.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.config import settings
from app.utils import ordered_map
from .errors import ConfigError, SolverError
from .geometry import Field, Mesh, ObservationOperator, graph_laplacian

log = logging.getLogger(__name__)

KERNEL_KINDS = ("matern-1/2", "matern-3/2", "rbf")
# CLI / config short names
KIND_ALIASES = {"gp-m12": "matern-1/2", "gp-m32": "matern-3/2", "gp-rbf": "rbf"}
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
DEFAULT_GRID = tuple(np.logspace(-2, 1, 20))


def laplacian_spectrum(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    try:
        lam, V = np.linalg.eigh(graph_laplacian(mesh).toarray())
    except np.linalg.LinAlgError as e:
        raise SolverError(f"Laplacian eigendecomposition failed: {e}") from e
    # round-off can push the zero eigenvalue slightly negative
    return np.clip(lam, 0.0, None), V


@dataclass
class GraphGpModel:
    kind: str
    sigma_f: float = 1.0
    lengthscale: float = 1.0
    noise_sigma: float = 0.0
    log_marginal_likelihood: Optional[float] = None
    _spectrum: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.kind = KIND_ALIASES.get(self.kind, self.kind)
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown GP kernel {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.sigma_f <= 0 or self.lengthscale <= 0:
            raise ConfigError("sigma_f and lengthscale must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")

    def spectrum(self, mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
        key = mesh.digest()
        if key not in self._spectrum:
            self._spectrum = {key: laplacian_spectrum(mesh)}
        return self._spectrum[key]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma_f": self.sigma_f, "lengthscale": self.lengthscale,
                "noise_sigma": self.noise_sigma, "log_marginal_likelihood": self.log_marginal_likelihood}

    @classmethod
    def from_dict(cls, d: dict) -> "GraphGpModel":
        return cls(**d)


def spectral_response(kind: str, lam: np.ndarray, lengthscale: float) -> np.ndarray:
    kind = KIND_ALIASES.get(kind, kind)
    if kind == "rbf":
        return np.exp(-0.5 * lengthscale**2 * lam)
    nu = 0.5 if kind == "matern-1/2" else 1.5
    return (2.0 * nu / lengthscale**2 + lam) ** (-nu)


def _unit_kernel(kind: str, lam: np.ndarray, V: np.ndarray, lengthscale: float) -> np.ndarray:
    """Kernel with mean diagonal 1."""
    K = (V * spectral_response(kind, lam, lengthscale)) @ V.T
    K = 0.5 * (K + K.T)
    return K / np.mean(np.diag(K))


def gp_kernel_matrix(model: GraphGpModel, mesh: Mesh) -> np.ndarray:
    lam, V = model.spectrum(mesh)
    return model.sigma_f**2 * _unit_kernel(model.kind, lam, V, model.lengthscale)


def _cholesky(A: np.ndarray):
    n = A.shape[0]
    for jitter in JITTERS:
        try:
            return cho_factor(A + jitter * np.eye(n), lower=True)
        except LinAlgError:
            continue
    raise SolverError(f"covariance is not positive definite after jitter {JITTERS[-1]:g}")


def _log_ml(K_oo: np.ndarray, y: np.ndarray, sigma: float) -> float:
    m = y.size
    if m == 0:
        return 0.0
    c = _cholesky(K_oo + sigma**2 * np.eye(m))
    alpha = cho_solve(c, y)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(-0.5 * y @ alpha - 0.5 * logdet - 0.5 * m * math.log(2.0 * math.pi))


def gp_fit_mml(mesh: Mesh, observation: ObservationOperator, y: np.ndarray, kind: str,
               sigma_f_grid: Sequence[float] = DEFAULT_GRID, lengthscale_grid: Sequence[float] = DEFAULT_GRID,
               sigma_grid: Optional[Sequence[float]] = None, threads: Optional[int] = None) -> GraphGpModel:
    """
    Grid search for the hyperparameters maximising the log marginal likelihood of
    the observed values. With no sigma grid the operator's sigma is kept fixed.
    Ties go to the smallest lengthscale, then the smallest sigma_f and sigma.
    """
    if not len(sigma_f_grid) or not len(lengthscale_grid):
        raise ConfigError("GP hyperparameter grids must be non-empty")
    y = np.asarray(y, dtype=np.float64).ravel()
    ids = np.asarray(observation.node_ids, dtype=np.int64)
    sigmas = sorted(float(s) for s in sigma_grid) if sigma_grid else [observation.sigma]
    search = GraphGpModel(kind)
    lam, V = search.spectrum(mesh)

    def score(ell: float) -> List[Tuple[float, float, float, float]]:
        K1 = _unit_kernel(search.kind, lam, V, ell)[np.ix_(ids, ids)]
        return [(_log_ml(sf**2 * K1, y, s), ell, sf, s) for sf in sorted(sigma_f_grid) for s in sigmas]

    rows = [r for chunk in ordered_map(score, sorted(float(l) for l in lengthscale_grid), threads or settings.threads)
            for r in chunk]
    best = rows[0]
    for r in rows[1:]:
        if r[0] > best[0]:
            best = r
    ll, ell, sf, s = best
    log.info("gp %s: sigma_f=%.3g lengthscale=%.3g sigma=%.3g (log ml %.3f over %d candidates)",
             search.kind, sf, ell, s, ll, len(rows))
    model = GraphGpModel(search.kind, sigma_f=sf, lengthscale=ell, noise_sigma=s, log_marginal_likelihood=ll)
    model._spectrum = search._spectrum
    return model


def gp_posterior(model: GraphGpModel, mesh: Mesh, observation: ObservationOperator, y: np.ndarray,
                 channel_name: str = "u") -> Tuple[Field, Field]:
    K = gp_kernel_matrix(model, mesh)
    prior_var = np.diag(K).copy()
    ids = np.asarray(observation.node_ids, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if ids.size == 0:
        return Field(np.zeros(mesh.n_nodes), (channel_name,)), Field(np.sqrt(prior_var), (channel_name,))
    c = _cholesky(K[np.ix_(ids, ids)] + model.noise_sigma**2 * np.eye(ids.size))
    K_xo = K[:, ids]
    mean = K_xo @ cho_solve(c, y)
    var = prior_var - np.sum(K_xo * cho_solve(c, K_xo.T).T, axis=1)
    std = np.sqrt(np.clip(var, 0.0, None))
    return Field(mean, (channel_name,)), Field(std, (channel_name,))


def save_gp_model(model: GraphGpModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def load_gp_model(path) -> GraphGpModel:
    return GraphGpModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
