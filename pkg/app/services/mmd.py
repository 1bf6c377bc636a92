"""
Squared maximum mean discrepancy with a Gaussian kernel (biased V-statistic).

mmd2(X, Y) = mean k(X, X) + mean k(Y, Y) - 2 mean k(X, Y),
k(a, b) = exp(-|a - b|^2 / (2 bw^2)).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import autodiff as ad
from .errors import DegenerateBatchError

BANDWIDTH_FLOOR = 1e-3


def K(x: np.ndarray, y: np.ndarray, bw: float) -> np.ndarray:
    return np.exp(-0.5 * cdist(x, y, "sqeuclidean") / bw**2)


def _check(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> None:
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise DegenerateBatchError(f"mmd2 needs at least 2 samples per side, got {X.shape[0]} and {Y.shape[0]}")
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")


def mmd2(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    _check(X, Y, bandwidth)
    value = K(X, X, bandwidth).mean() + K(Y, Y, bandwidth).mean() - 2.0 * K(X, Y, bandwidth).mean()
    return max(0.0, float(value))


def median_bandwidth(X: np.ndarray, Y: np.ndarray, floor: float = BANDWIDTH_FLOOR) -> float:
    """Median pairwise Euclidean distance over the pooled samples, floored."""
    pooled = np.vstack([np.atleast_2d(X), np.atleast_2d(Y)])
    if pooled.shape[0] < 2:
        return floor
    return max(floor, float(np.median(pdist(pooled))))


def _sq_dists_t(A: ad.Tensor, B: ad.Tensor) -> ad.Tensor:
    """|a_i - b_j|^2 as an (m, n) tensor from primitives."""
    m, n = A.shape[0], B.shape[0]
    sa = ad.row_sums(ad.mul(A, A))                       # (m, 1)
    sb = ad.row_sums(ad.mul(B, B))                       # (n, 1)
    cross = ad.matmul(A, B, trans_b=True)                # (m, n)
    rows = ad.outer_ones(sa, n)                          # sa_i
    cols = ad.matmul(ad.tensor(np.ones((m, 1))), sb, trans_b=True)  # sb_j
    return ad.add(ad.add(rows, cols), ad.scale(cross, -2.0))


def _gram_mean_t(A: ad.Tensor, B: ad.Tensor, bandwidth: float) -> ad.Tensor:
    d = _sq_dists_t(A, B)
    return ad.mean_all(ad.exp(ad.scale(d, -0.5 / bandwidth**2)))


def mmd2_tensor(X: ad.Tensor, Y: np.ndarray, bandwidth: float) -> ad.Tensor:
    """Differentiable mmd2 between a tensor batch X and constant reference samples Y."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    _check(X.data, Y, bandwidth)
    yy = float(K(Y, Y, bandwidth).mean())
    xx = _gram_mean_t(X, X, bandwidth)
    xy = _gram_mean_t(X, ad.tensor(Y), bandwidth)
    return ad.add(ad.add(xx, ad.tensor([[yy]])), ad.scale(xy, -2.0))


def mmd_null_threshold(n: int, d: int, rng: np.random.Generator, reps: int = 200,
                       quantile: float = 0.99) -> float:
    """Monte Carlo quantile of mmd2 between two independent N(0, I_d) batches of size n."""
    stats = []
    for _ in range(reps):
        X = rng.standard_normal((n, d))
        Y = rng.standard_normal((n, d))
        stats.append(mmd2(X, Y, median_bandwidth(X, Y)))
    return float(np.quantile(stats, quantile))
