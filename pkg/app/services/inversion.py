"""
Latent-space posterior sampling.

The prior over fields is the pushforward of N(0, I) through the decoder, so
every sampler here works on latents z and decodes. Three samplers:

  * abc_sample              truncation ABC: keep the N_a of N_s prior draws whose
                            simulated observations are closest to y
  * abc_sample_joint_noise  same, with sigma drawn per sample from NoisePrior
  * pcn_sample              preconditioned Crank-Nicolson Metropolis chain

ABC draws are evaluated in batches; batch k uses its own generator derived from
(one draw of the caller's rng, k), so results do not depend on the thread count.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps_stats

from app.config import settings
from app.utils import ordered_map, spawn_streams
from .dataset import Dataset, default_channel_names, read_dataset, write_dataset
from .errors import ConfigError, DegenerateBatchError, ObservationIndexError, ShapeMismatchError
from .geometry import Field, Mesh, ObservationOperator, stack_observations

log = logging.getLogger(__name__)

LOW_ACCEPTANCE = 0.01


class Decoder(Protocol):
    d_z: int

    def decode_batch(self, Z: np.ndarray, mesh: Mesh) -> np.ndarray: ...


class LinearDecoder:
    """u = reshape(A z + b) on a fixed mesh. Gives closed-form posteriors for testing samplers."""

    def __init__(self, A: np.ndarray, b: np.ndarray, d_u: int = 1):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64).ravel()
        if self.A.shape[0] != self.b.size or self.b.size % d_u:
            raise ShapeMismatchError("LinearDecoder", f"A {self.A.shape} vs b {self.b.shape} with d_u={d_u}")
        self.d_u = d_u
        self.channel_names = default_channel_names(d_u)

    @property
    def d_z(self) -> int:
        return self.A.shape[1]

    def decode_batch(self, Z: np.ndarray, mesh: Mesh) -> np.ndarray:
        Z = np.atleast_2d(Z)
        return (Z @ self.A.T + self.b).reshape(Z.shape[0], -1, self.d_u)

    def gaussian_posterior(self, ops: Sequence[ObservationOperator], y: np.ndarray,
                           sigma: float) -> Tuple[np.ndarray, np.ndarray]:
        """Exact posterior mean and covariance of z for y = H(Az + b) + N(0, sigma^2 I)."""
        rows = []
        for op in ops:
            for i in op.node_ids:
                rows.append(i * self.d_u + op.channel)
        HA = self.A[rows]
        Hb = self.b[rows]
        precision = HA.T @ HA / sigma**2 + np.eye(self.d_z)
        cov = np.linalg.inv(precision)
        mean = cov @ HA.T @ (np.asarray(y) - Hb) / sigma**2
        return mean, cov


@dataclass
class NoisePrior:
    """sigma = exp(eps - shift) + floor with eps ~ N(0, 1); `fixed_eps` collapses it to a point."""
    shift: float = 4.0
    floor: float = 1e-3
    fixed_eps: Optional[float] = None

    def transform(self, eps: np.ndarray) -> np.ndarray:
        return np.exp(np.asarray(eps, dtype=np.float64) - self.shift) + self.floor

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.fixed_eps is not None:
            return np.full(n, float(self.transform(self.fixed_eps)))
        return self.transform(rng.standard_normal(n))

    @property
    def median(self) -> float:
        return float(self.transform(0.0))


@dataclass
class InverseProblem:
    mesh: Mesh
    observations: List[ObservationOperator]
    y: np.ndarray
    decoder: Decoder
    noise_mode: str = "known"     # "known" | "infer"

    def __post_init__(self):
        if isinstance(self.observations, ObservationOperator):
            self.observations = [self.observations]
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.noise_mode not in ("known", "infer"):
            raise ConfigError(f"unknown noise mode {self.noise_mode!r}")
        for op in self.observations:
            if op.node_ids and max(op.node_ids) >= self.mesh.n_nodes:
                raise ObservationIndexError(f"node id {max(op.node_ids)} out of range for {self.mesh.n_nodes} nodes")
        if self.y.size != self.n_obs:
            raise ShapeMismatchError("InverseProblem", f"|y|={self.y.size} but the operators select {self.n_obs} values")
        if self.noise_mode == "known" and any(op.sigma <= 0 for op in self.observations):
            raise ConfigError("known-sigma inversion needs sigma > 0 on every observation operator")

    @property
    def n_obs(self) -> int:
        return sum(op.size for op in self.observations)

    @property
    def sigma_vector(self) -> np.ndarray:
        return np.concatenate([np.full(op.size, op.sigma) for op in self.observations]) if self.observations \
            else np.zeros(0)

    def predicted(self, fields: np.ndarray) -> np.ndarray:
        """H u for a (B, N, d_u) batch of decoded fields."""
        if not self.observations:
            return np.zeros(fields.shape[:-2] + (0,))
        return stack_observations(self.observations, fields)

    def potential(self, fields: np.ndarray) -> np.ndarray:
        """Phi = |y - H u|^2 / (2 sigma^2) per batch member."""
        r = (self.y - self.predicted(fields)) / np.where(self.sigma_vector > 0, self.sigma_vector, 1.0)
        return 0.5 * np.sum(r * r, axis=-1)


@dataclass
class PosteriorEnsemble:
    latents: np.ndarray                    # (N_a, d_z)
    fields: np.ndarray                     # (N_a, N, d_u), field units
    residuals: np.ndarray                  # (N_a,), ascending for ABC, chain order for pCN
    sigmas: Optional[np.ndarray] = None    # (N_a,) when sigma was inferred
    metadata: Dict[str, object] = field(default_factory=dict)
    channel_names: tuple = ("u",)

    def __len__(self) -> int:
        return self.latents.shape[0]

    def member(self, i: int) -> Field:
        return Field(self.fields[i], self.channel_names)

    def mode(self) -> Field:
        """Smallest-residual member."""
        return self.member(int(np.argmin(self.residuals)))

    def ranked(self) -> "PosteriorEnsemble":
        """Copy with members in ascending residual order."""
        order = _truncate(self.residuals, len(self))
        return PosteriorEnsemble(
            latents=self.latents[order],
            fields=self.fields[order],
            residuals=self.residuals[order],
            sigmas=None if self.sigmas is None else self.sigmas[order],
            metadata={**self.metadata, "order": "residual"},
            channel_names=self.channel_names,
        )


@dataclass
class PosteriorStats:
    mean: Field
    std: Field
    quantiles: Dict[float, np.ndarray]


def _channel_names(decoder, d_u: int) -> tuple:
    names = getattr(decoder, "channel_names", None)
    return tuple(names) if names and len(names) == d_u else default_channel_names(d_u)


def _truncate(residuals: np.ndarray, n_accept: int) -> np.ndarray:
    # stable argsort: equal residuals keep sample order
    return np.argsort(residuals, kind="stable")[:n_accept]


def _abc(problem: InverseProblem, n_samples: int, n_accept: int, batch: int, rng: np.random.Generator,
         noise_prior: Optional[NoisePrior], threads: Optional[int]) -> PosteriorEnsemble:
    if n_accept > n_samples:
        raise ConfigError(f"n_accept ({n_accept}) must not exceed n_samples ({n_samples})")
    if n_accept < 1 or batch < 1:
        raise ConfigError("n_accept and batch must be >= 1")
    t0 = time.perf_counter()
    d_z = problem.decoder.d_z
    sizes = [min(batch, n_samples - s) for s in range(0, n_samples, batch)]
    streams = spawn_streams(rng, len(sizes))
    sigma_vec = problem.sigma_vector

    def run(job):
        size, r = job
        Z = r.standard_normal((size, d_z))
        sig = noise_prior.draw(r, size) if noise_prior is not None else None
        fields = problem.decoder.decode_batch(Z, problem.mesh)
        g = r.standard_normal((size, problem.n_obs))
        noise = g * (sig[:, None] if sig is not None else sigma_vec)
        res = np.linalg.norm(problem.y - (problem.predicted(fields) + noise), axis=1)
        return Z, sig, res

    parts = ordered_map(run, list(zip(sizes, streams)), threads or settings.threads)
    Z = np.vstack([p[0] for p in parts])
    residuals = np.concatenate([p[2] for p in parts])
    keep = _truncate(residuals, n_accept)

    latents = Z[keep]
    # one decode call over the accepted latents
    fields = problem.decoder.decode_batch(latents, problem.mesh)
    sigmas = np.concatenate([p[1] for p in parts])[keep] if noise_prior is not None else None
    elapsed = time.perf_counter() - t0
    log.info("abc: kept %d of %d (max residual %.3e, %.2fs)", n_accept, n_samples, residuals[keep[-1]], elapsed)
    return PosteriorEnsemble(
        latents=latents,
        fields=fields,
        residuals=residuals[keep],
        sigmas=sigmas,
        metadata={"method": "abc", "n_samples": n_samples, "n_accept": n_accept, "batch": batch,
                  "noise": "infer" if noise_prior is not None else "known", "seconds": elapsed, "order": "residual"},
        channel_names=_channel_names(problem.decoder, fields.shape[-1]),
    )


def abc_sample(problem: InverseProblem, n_samples: int, n_accept: int, batch: int,
               rng: np.random.Generator, threads: Optional[int] = None) -> PosteriorEnsemble:
    return _abc(problem, n_samples, n_accept, batch, rng, None, threads)


def abc_sample_joint_noise(problem: InverseProblem, noise_prior: NoisePrior, n_samples: int, n_accept: int,
                           batch: int, rng: np.random.Generator, threads: Optional[int] = None) -> PosteriorEnsemble:
    if problem.noise_mode != "infer":
        raise ConfigError("joint-noise ABC needs noise_mode='infer'")
    return _abc(problem, n_samples, n_accept, batch, rng, noise_prior, threads)


def pcn_sample(problem: InverseProblem, n_steps: int, beta: float, burn_in: int,
               rng: np.random.Generator, thin: int = 1, z0: Optional[np.ndarray] = None) -> PosteriorEnsemble:
    """
    pCN chain targeting exp(-Phi(z)) N(z; 0, I). Proposals
    z' = sqrt(1 - beta^2) z + beta w leave N(0, I) invariant, so the
    acceptance ratio only involves Phi.
    """
    if not 0 < beta <= 1:
        raise ConfigError(f"beta must be in (0, 1], got {beta}")
    if problem.noise_mode != "known":
        raise ConfigError("pCN sampling needs a known sigma")
    if burn_in >= n_steps:
        raise ConfigError(f"burn_in ({burn_in}) leaves no samples out of {n_steps} steps")
    t0 = time.perf_counter()
    d_z = problem.decoder.d_z
    rho = np.sqrt(1.0 - beta * beta)
    z = rng.standard_normal(d_z) if z0 is None else np.asarray(z0, dtype=np.float64).copy()
    phi = float(problem.potential(problem.decoder.decode_batch(z[None], problem.mesh))[0])

    kept, accepted = [], 0
    for step in range(n_steps):
        prop = rho * z + beta * rng.standard_normal(d_z)
        phi_prop = float(problem.potential(problem.decoder.decode_batch(prop[None], problem.mesh))[0])
        if np.log(rng.uniform()) < phi - phi_prop:
            z, phi = prop, phi_prop
            accepted += 1
        if step >= burn_in and (step - burn_in) % thin == 0:
            kept.append(z.copy())

    rate = accepted / n_steps
    if rate < LOW_ACCEPTANCE:
        log.warning("pcn: acceptance rate %.4f below %.2f; consider a smaller beta", rate, LOW_ACCEPTANCE)
    chain = np.vstack(kept)
    fields = problem.decoder.decode_batch(chain, problem.mesh)
    residuals = np.linalg.norm(problem.y - problem.predicted(fields), axis=1)
    elapsed = time.perf_counter() - t0
    log.info("pcn: %d steps, acceptance %.3f, %d samples kept (%.2fs)", n_steps, rate, len(kept), elapsed)
    return PosteriorEnsemble(
        latents=chain,
        fields=fields,
        residuals=residuals,
        metadata={"method": "pcn", "n_steps": n_steps, "beta": beta, "burn_in": burn_in, "thin": thin,
                  "acceptance_rate": rate, "seconds": elapsed, "order": "chain"},
        channel_names=_channel_names(problem.decoder, fields.shape[-1]),
    )


def posterior_stats(ensemble: PosteriorEnsemble, quantiles: Sequence[float] = (0.05, 0.5, 0.95)) -> PosteriorStats:
    if len(ensemble) < 2:
        raise DegenerateBatchError("posterior statistics need at least 2 ensemble members")
    f = ensemble.fields
    return PosteriorStats(
        mean=Field(f.mean(axis=0), ensemble.channel_names),
        std=Field(f.std(axis=0, ddof=1), ensemble.channel_names),
        quantiles={float(q): np.quantile(f, q, axis=0) for q in quantiles},
    )


def ks_statistic(samples: np.ndarray, reference: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(sps_stats.ks_2samp(np.ravel(samples), np.ravel(reference)).statistic)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _sidecar(stem: Union[str, Path]) -> Path:
    return Path(str(stem) + ".json")


def write_ensemble(ensemble: PosteriorEnsemble, mesh: Mesh, stem: Union[str, Path]) -> None:
    """<stem>.gabd holds the decoded fields, <stem>.json residuals, sigmas, latents and metadata."""
    samples = [(mesh, ensemble.member(i)) for i in range(len(ensemble))]
    write_dataset(Dataset.from_samples(samples), str(stem) + ".gabd")
    payload = {
        "residuals": ensemble.residuals.tolist(),
        "sigmas": None if ensemble.sigmas is None else ensemble.sigmas.tolist(),
        "latents": ensemble.latents.tolist(),
        "channel_names": list(ensemble.channel_names),
        "metadata": ensemble.metadata,
    }
    _sidecar(stem).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def read_ensemble(stem: Union[str, Path]) -> Tuple[PosteriorEnsemble, Mesh]:
    ds = read_dataset(str(stem) + ".gabd")
    meta = json.loads(_sidecar(stem).read_text(encoding="utf-8"))
    fields = np.stack([f.values for _, f in ds.samples])
    ens = PosteriorEnsemble(
        latents=np.asarray(meta["latents"], dtype=np.float64),
        fields=fields,
        residuals=np.asarray(meta["residuals"], dtype=np.float64),
        sigmas=None if meta["sigmas"] is None else np.asarray(meta["sigmas"], dtype=np.float64),
        metadata=meta["metadata"],
        channel_names=tuple(meta["channel_names"]),
    )
    return ens, ds.samples[0][0]


def write_query_samples(ensemble: PosteriorEnsemble, nodes: Sequence[int], path, channel: int = 0) -> None:
    """Raw posterior samples at selected nodes, one row per ensemble member."""
    nodes = [int(n) for n in nodes]
    n_nodes = ensemble.fields.shape[1]
    if any(not 0 <= n < n_nodes for n in nodes):
        raise ObservationIndexError(f"query nodes {nodes} out of range for {n_nodes} nodes")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + [f"node_{n}" for n in nodes])
        for i in range(len(ensemble)):
            w.writerow([i] + [repr(float(ensemble.fields[i, n, channel])) for n in nodes])
