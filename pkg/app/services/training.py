"""
Autoencoder training.

Minimises, per minibatch,

    mean_n |u_n - D(E(u_n))|^2  +  lambda * mmd2({E(u_n)}, {z_k ~ N(0, I)})

with Adam. The MMD reference batch is redrawn every iteration with the same
size as the data batch, and the kernel bandwidth is the median pairwise
distance of the pooled batches (floored at 1e-3).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.models.schema import TrainConfig
from app.utils import config_digest
from . import autodiff as ad
from .checkpoint import Checkpoint
from .dataset import Dataset
from .errors import DegenerateBatchError, DivergenceError, NonFiniteError
from .gcn import Architecture, decoder_tensor, encoder_tensor, init_params
from .mmd import median_bandwidth, mmd2, mmd2_tensor
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class LossTrace:
    recon: List[float] = field(default_factory=list)
    mmd: List[float] = field(default_factory=list)
    total: List[float] = field(default_factory=list)

    def append(self, recon: float, mmd_value: float, total: float) -> None:
        self.recon.append(recon)
        self.mmd.append(mmd_value)
        self.total.append(total)

    def __len__(self) -> int:
        return len(self.total)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "recon", "mmd", "total"])
            for i, row in enumerate(zip(self.recon, self.mmd, self.total)):
                w.writerow([i] + [repr(float(v)) for v in row])


def _leaves(params: Dict[str, np.ndarray]) -> Dict[str, ad.Tensor]:
    return {k: ad.parameter(v, k) for k, v in params.items()}


def autoencoder_loss(P: Dict[str, ad.Tensor], batch: List[Tuple], arch: Architecture,
                     reference: np.ndarray, mmd_weight: float) -> Tuple[ad.Tensor, ad.Tensor, float]:
    """
    Builds the loss graph for one minibatch of (mesh, normalized values) pairs.
    Returns (total, reconstruction, mmd value). The MMD term only enters the
    graph when mmd_weight > 0; otherwise its value is computed for reporting.
    """
    latents, recon = [], None
    for mesh, u_norm in batch:
        z = encoder_tensor(mesh, u_norm, P, arch)
        out = decoder_tensor(mesh, z, P, arch)
        term = ad.mean_squared_error(out, ad.tensor(u_norm))
        recon = term if recon is None else ad.add(recon, term)
        latents.append(z)
    recon = ad.scale(recon, 1.0 / len(batch))
    Z = ad.concat(latents, axis=0)

    if len(batch) < 2:
        if mmd_weight > 0:
            raise DegenerateBatchError("the MMD term needs a batch of at least 2 samples")
        return recon, recon, float("nan")
    bandwidth = median_bandwidth(Z.data, reference)
    if mmd_weight > 0:
        mmd_t = mmd2_tensor(Z, reference, bandwidth)
        total = ad.add(recon, ad.scale(mmd_t, mmd_weight))
        return total, recon, float(mmd_t.data.item())
    return recon, recon, mmd2(Z.data, reference, bandwidth)


def train_autoencoder(dataset: Dataset, arch: Architecture, config: TrainConfig,
                      rng: np.random.Generator, init: Optional[Dict[str, np.ndarray]] = None
                      ) -> Tuple[Checkpoint, LossTrace]:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    prepared = [(mesh, dataset.normalize(f.values)) for mesh, f in dataset.samples]
    params = init if init is not None else init_params(arch, rng)
    state = AdamState.for_params(params, lr=config.lr)
    trace = LossTrace()
    batch_size = config.batch_size
    replace = batch_size > len(prepared)
    t0 = time.perf_counter()

    for it in range(config.iterations):
        if config.lr_decay is not None:
            state.lr = config.lr * config.lr_decay ** it
        idx = np.sort(rng.choice(len(prepared), size=batch_size, replace=replace))
        reference = rng.standard_normal((batch_size, arch.d_z))
        batch = [prepared[i] for i in idx]

        P = _leaves(params)
        try:
            total, recon, mmd_value = autoencoder_loss(P, batch, arch, reference, config.mmd_weight)
        except NonFiniteError as e:
            raise DivergenceError(it, float("nan")) from e
        total_value = float(total.data.item())
        if not np.isfinite(total_value):
            raise DivergenceError(it, total_value)
        grads = ad.backward(total)
        params = adam_step(state, params, grads)
        trace.append(float(recon.data.item()), mmd_value, total_value)

        if (it + 1) % config.log_every == 0 or it == config.iterations - 1:
            log.info("iter %d/%d recon=%.4e mmd=%.4e total=%.4e (%.1fs)", it + 1, config.iterations,
                     trace.recon[-1], mmd_value, total_value, time.perf_counter() - t0)

    ckpt = Checkpoint(
        arch=arch,
        params=params,
        mean=dataset.mean.copy(),
        std=dataset.std.copy(),
        channel_names=dataset.samples[0][1].channel_names,
        config_digest=config_digest(config.model_dump()),
    )
    return ckpt, trace


def latent_gaussianity(latents: np.ndarray) -> Dict[str, float]:
    """Worst per-dimension |mean| and the std range of an encoded batch."""
    mu = latents.mean(axis=0)
    sd = latents.std(axis=0, ddof=1)
    return {"max_abs_mean": float(np.max(np.abs(mu))), "min_std": float(sd.min()), "max_std": float(sd.max())}
