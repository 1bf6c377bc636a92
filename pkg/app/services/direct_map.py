"""
Supervised direct-map baseline: (geometry, sparse observations) -> full field.

Node inputs are [coords || masked y || mask], with y normalized by the training
statistics of the observed channel and zero at unobserved nodes. Because the
network only ever sees masks drawn from its training protocol, predictions are
only meaningful for observations drawn the same way.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from app.models.schema import TrainConfig
from app.utils import config_digest
from . import autodiff as ad
from .checkpoint import Checkpoint
from .dataset import Dataset
from .errors import ConsistencyError, DivergenceError, NonFiniteError
from .gcn import Architecture, init_params, regress_np, regressor_tensor
from .geometry import Field, Mesh, ObservationOperator, apply_observation, inverse_count_draw, random_observation
from .optim import AdamState, adam_step
from .training import LossTrace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObservationProtocol:
    """How observation masks and noise are drawn at training time."""
    count: int = 10
    count_distribution: str = "fixed"   # "fixed" | "inverse"
    count_min: int = 5
    count_max: int = 50
    sigma: float = 1e-2
    channel: int = 0

    def draw(self, n_nodes: int, rng: np.random.Generator) -> ObservationOperator:
        if self.count_distribution == "inverse":
            count = inverse_count_draw(rng, self.count_min, self.count_max)
        else:
            count = self.count
        return random_observation(n_nodes, count, rng, self.channel, self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationProtocol":
        return cls(**d)


def node_inputs(mesh: Mesh, observation: ObservationOperator, y: np.ndarray, mean: np.ndarray,
                std: np.ndarray) -> np.ndarray:
    """(N, d + 2) direct-map inputs."""
    ch = observation.channel
    masked = np.zeros(mesh.n_nodes)
    mask = np.zeros(mesh.n_nodes)
    ids = np.asarray(observation.node_ids, dtype=np.int64)
    masked[ids] = (np.asarray(y, dtype=np.float64) - mean[ch]) / std[ch]
    mask[ids] = 1.0
    return np.column_stack([mesh.coords, masked, mask])


def train_direct_map(dataset: Dataset, protocol: ObservationProtocol, arch: Architecture, config: TrainConfig,
                     rng: np.random.Generator) -> Tuple[Checkpoint, LossTrace]:
    if arch.kind != "direct-map":
        raise ConsistencyError(f"direct-map training needs a direct-map architecture, got {arch.kind}")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not 0 <= protocol.channel < dataset.n_channels:
        raise ConsistencyError(f"protocol observes channel {protocol.channel} of a {dataset.n_channels}-channel dataset")
    prepared = [(mesh, f, dataset.normalize(f.values)) for mesh, f in dataset.samples]
    params = init_params(arch, rng)
    state = AdamState.for_params(params, lr=config.lr)
    trace = LossTrace()
    replace = config.batch_size > len(prepared)
    t0 = time.perf_counter()

    for it in range(config.iterations):
        if config.lr_decay is not None:
            state.lr = config.lr * config.lr_decay ** it
        idx = np.sort(rng.choice(len(prepared), size=config.batch_size, replace=replace))
        P = {k: ad.parameter(v, k) for k, v in params.items()}
        loss = None
        try:
            for i in idx:
                mesh, fld, target = prepared[i]
                op = protocol.draw(mesh.n_nodes, rng)
                y = apply_observation(op, fld, rng)
                x = ad.tensor(node_inputs(mesh, op, y, dataset.mean, dataset.std))
                term = ad.mean_squared_error(regressor_tensor(mesh, x, P, arch, "dm"), ad.tensor(target))
                loss = term if loss is None else ad.add(loss, term)
            loss = ad.scale(loss, 1.0 / len(idx))
        except NonFiniteError as e:
            raise DivergenceError(it, float("nan")) from e
        value = float(loss.data.item())
        if not np.isfinite(value):
            raise DivergenceError(it, value)
        params = adam_step(state, params, ad.backward(loss))
        trace.append(value, 0.0, value)
        if (it + 1) % config.log_every == 0 or it == config.iterations - 1:
            log.info("direct-map iter %d/%d mse=%.4e (%.1fs)", it + 1, config.iterations, value,
                     time.perf_counter() - t0)

    ckpt = Checkpoint(
        arch=arch,
        params=params,
        mean=dataset.mean.copy(),
        std=dataset.std.copy(),
        channel_names=dataset.samples[0][1].channel_names,
        config_digest=config_digest({"train": config.model_dump(), "protocol": protocol.to_dict()}),
        extra={"protocol": protocol.to_dict()},
    )
    return ckpt, trace


def _check_protocol(protocol: Optional[ObservationProtocol], observation: ObservationOperator) -> None:
    if protocol is None:
        return
    problems = []
    if observation.channel != protocol.channel:
        problems.append(f"channel {observation.channel} (trained on {protocol.channel})")
    if not np.isclose(observation.sigma, protocol.sigma):
        problems.append(f"sigma {observation.sigma:g} (trained on {protocol.sigma:g})")
    if protocol.count_distribution == "fixed" and observation.size != protocol.count:
        problems.append(f"{observation.size} observations (trained on {protocol.count})")
    elif protocol.count_distribution == "inverse" and not protocol.count_min <= observation.size <= protocol.count_max:
        problems.append(f"{observation.size} observations (trained on {protocol.count_min}..{protocol.count_max})")
    if problems:
        log.warning("direct-map observation differs from its training protocol: %s", ", ".join(problems))


def predict_direct_map(ckpt: Checkpoint, mesh: Mesh, observation: ObservationOperator, y: np.ndarray) -> Field:
    if ckpt.arch.kind != "direct-map":
        raise ConsistencyError(f"checkpoint holds a {ckpt.arch.kind} model, not a direct map")
    observation.check(mesh.n_nodes, ckpt.arch.d_u)
    raw = ckpt.extra.get("protocol")
    _check_protocol(ObservationProtocol.from_dict(raw) if raw else None, observation)
    x = node_inputs(mesh, observation, y, ckpt.mean, ckpt.std)
    out = regress_np(mesh, x, ckpt.params, ckpt.arch, "dm")[0]
    return Field(out * ckpt.std + ckpt.mean, ckpt.channel_names)
