"""
Configuration-driven experiment runner.

    generate -> train -> infer -> baselines -> evaluate

Every stage draws from its own generator derived from (seed, stage[, case]), so
skipping a stage (e.g. training when a checkpoint is given) leaves the others
unchanged, and test cases can run on worker threads without changing results.
Artifacts land in the run directory:

    data.gabd, model.gabw, loss_trace.csv
    cases/<k>/<method>.gabd   truth | mean | std | |error| on the scored channels
    cases/<k>/<method>.json   ensemble sidecar (GABI methods)
    query_samples.csv         raw samples at `query_nodes` (first case)
    metrics.csv, timings.csv, diagnostics.json, audit/*.json
"""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.audit import write_audit
from app.config import settings
from app.models.schema import ExperimentConfig, TrainConfig
from app.storage import case_dir, run_dir
from app.utils import ordered_map, stream
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import Dataset, read_dataset, write_dataset
from .direct_map import ObservationProtocol, predict_direct_map, train_direct_map
from .errors import ConfigError, StageError
from .geometry import Field, Mesh, ObservationOperator, apply_observation, inverse_count_draw, random_observation
from .graph_gp import KIND_ALIASES, gp_fit_mml, gp_posterior
from .heat import sample_heat_dataset
from .helmholtz import sample_helmholtz_dataset
from .inversion import (InverseProblem, NoisePrior, PosteriorEnsemble, abc_sample, abc_sample_joint_noise,
                        pcn_sample, posterior_stats, write_ensemble, write_query_samples)
from .metrics import CaseScore, MetricsRow, aggregate, metrics_csv, score_case, timings_csv
from .mmd import median_bandwidth, mmd2, mmd_null_threshold
from .training import latent_gaussianity, train_autoencoder

log = logging.getLogger(__name__)

# stream indices
GENERATE, TRAIN, CASES, INFER, DIRECT, DIAGNOSE = range(6)
DEFAULT_SIGMA_GRID = tuple(np.logspace(-3, 0, 10))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return ExperimentConfig.model_validate(raw)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"invalid experiment config {path}: {e}") from e


@contextlib.contextmanager
def stage(name: str, timings: Optional[Dict[str, float]] = None):
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as e:
        log.error("stage %s failed: %s", name, e)
        raise StageError(name, e) from e
    elapsed = time.perf_counter() - t0
    if timings is not None:
        timings[name] = elapsed
    log.info("stage %s: done in %.2fs", name, elapsed)


# ---------------------------------------------------------------------------
# data and test cases
# ---------------------------------------------------------------------------

def generate_dataset(config: ExperimentConfig, n: int, rng: np.random.Generator, threads: int = 1) -> Dataset:
    d = config.dataset
    if config.problem == "heat":
        return sample_heat_dataset(n, (d.nx, d.ny), rng, threads=threads)
    dataset, _ = sample_helmholtz_dataset(n, d.n_nodes, rng, kappa=d.kappa, gamma=d.gamma,
                                          k_neighbors=d.k_neighbors, threads=threads)
    return dataset


def prepare_data(config: ExperimentConfig, threads: int = 1) -> Tuple[Dataset, Dataset]:
    """(train, test); normalization statistics come from the training split."""
    d = config.dataset
    if d.path:
        full = read_dataset(d.path)
    else:
        full = generate_dataset(config, d.n_train + d.n_test, stream(config.seed, GENERATE), threads)
    if len(full) < d.n_train + d.n_test:
        raise ConfigError(f"dataset holds {len(full)} samples, config asks for {d.n_train} + {d.n_test}")
    train, test = full.split(d.n_train)
    return train, Dataset(test.samples[: d.n_test], test.mean, test.std)


@dataclass
class InferenceCase:
    case_id: int
    mesh: Mesh
    truth: Field
    observation: ObservationOperator
    y: np.ndarray
    sigma: float


def build_cases(config: ExperimentConfig, test: Dataset) -> List[InferenceCase]:
    obs = config.observation
    cases = []
    for k, (mesh, truth) in enumerate(test.samples):
        r = stream(config.seed, CASES, k)
        if obs.noise_mode == "infer":
            sigma = float(NoisePrior().draw(r, 1)[0])
        else:
            sigma = obs.sigma
        count = inverse_count_draw(r, obs.count_min, obs.count_max) if obs.count_distribution == "inverse" \
            else obs.count
        op = random_observation(mesh.n_nodes, count, r, obs.channel, sigma)
        cases.append(InferenceCase(k, mesh, truth, op, apply_observation(op, truth, r), sigma))
    return cases


def target_channels(config: ExperimentConfig, n_channels: int) -> List[int]:
    chans = config.observation.target_channels
    if chans is None:
        return list(range(n_channels))
    if any(not 0 <= c < n_channels for c in chans):
        raise ConfigError(f"target channels {chans} out of range for {n_channels} channels")
    return list(chans)


# ---------------------------------------------------------------------------
# per-case inference
# ---------------------------------------------------------------------------

@dataclass
class CaseResult:
    case_id: int
    mean: Field
    std: Field
    sigma_mean: Optional[float] = None
    sigma_std: Optional[float] = None
    sigma_median: Optional[float] = None
    ensemble: Optional[PosteriorEnsemble] = None
    seconds: float = 0.0


def infer_case(config: ExperimentConfig, ckpt: Checkpoint, case: InferenceCase, method: str,
               rng: np.random.Generator) -> CaseResult:
    s = config.sampler
    infer_sigma = config.observation.noise_mode == "infer"
    problem = InverseProblem(case.mesh, [case.observation], case.y, ckpt.autoencoder(),
                             noise_mode="infer" if infer_sigma else "known")
    t0 = time.perf_counter()
    if method == "pcn":
        if infer_sigma:
            raise ConfigError("pcn does not support noise_mode='infer'")
        ens = pcn_sample(problem, s.n_steps, s.beta, s.burn_in, rng, thin=s.thin)
    elif infer_sigma:
        ens = abc_sample_joint_noise(problem, NoisePrior(), s.n_samples, s.n_accept, s.batch, rng, threads=1)
    else:
        ens = abc_sample(problem, s.n_samples, s.n_accept, s.batch, rng, threads=1)
    st = posterior_stats(ens)
    seconds = time.perf_counter() - t0
    res = CaseResult(case.case_id, st.mean, st.std, ensemble=ens, seconds=seconds)
    if ens.sigmas is not None:
        res.sigma_mean = float(ens.sigmas.mean())
        res.sigma_std = float(ens.sigmas.std(ddof=1))
        res.sigma_median = float(np.median(ens.sigmas))
    return res


def gp_case(config: ExperimentConfig, kind: str, case: InferenceCase) -> CaseResult:
    obs = case.observation
    sigma_grid = config.baselines.gp_sigma_grid
    if config.observation.noise_mode == "infer":
        sigma_grid = sigma_grid or list(DEFAULT_SIGMA_GRID)
    grid = tuple(np.logspace(-2, 1, config.baselines.gp_grid_size))
    t0 = time.perf_counter()
    model = gp_fit_mml(case.mesh, obs, case.y, kind, grid, grid, sigma_grid, threads=1)
    name = case.truth.channel_names[obs.channel]
    mean, std = gp_posterior(model, case.mesh, obs, case.y, channel_name=name)
    res = CaseResult(case.case_id, mean, std, seconds=time.perf_counter() - t0)
    if config.observation.noise_mode == "infer":
        res.sigma_mean, res.sigma_std, res.sigma_median = model.noise_sigma, 0.0, model.noise_sigma
    return res


def direct_case(ckpt: Checkpoint, case: InferenceCase) -> CaseResult:
    t0 = time.perf_counter()
    pred = predict_direct_map(ckpt, case.mesh, case.observation, case.y)
    # point prediction: zero std
    return CaseResult(case.case_id, pred, Field(np.zeros_like(pred.values), pred.channel_names),
                      seconds=time.perf_counter() - t0)


def train_direct_baseline(config: ExperimentConfig, train: Dataset) -> Checkpoint:
    obs = config.observation
    protocol = ObservationProtocol(count=obs.count, count_distribution=obs.count_distribution,
                                   count_min=obs.count_min, count_max=obs.count_max, sigma=obs.sigma,
                                   channel=obs.channel)
    arch = config.model.architecture(train.samples[0][0].dim, train.n_channels, kind="direct-map",
                                     obs_channel=obs.channel)
    tc = TrainConfig(iterations=config.baselines.direct_iterations, batch_size=config.baselines.direct_batch_size,
                     lr=config.train.lr, mmd_weight=0.0, lr_decay=config.train.lr_decay,
                     log_every=config.train.log_every)
    ckpt, _ = train_direct_map(train, protocol, arch, tc, stream(config.seed, DIRECT))
    return ckpt


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _scores(cases: Sequence[InferenceCase], results: Sequence[CaseResult], channels: List[int]
            ) -> Dict[str, List[CaseScore]]:
    out: Dict[str, List[CaseScore]] = {}
    for case, res in zip(cases, results):
        for c in channels:
            name = case.truth.channel_names[c]
            if name not in res.mean.channel_names:
                continue
            k = res.mean.channel_names.index(name)
            out.setdefault(name, []).append(score_case(case.truth.values[:, c], res.mean.values[:, k],
                                                       res.std.values[:, k]))
        if res.sigma_mean is not None:
            out.setdefault("sigma", []).append(score_case(case.sigma, res.sigma_mean, res.sigma_std))
    return out


def method_rows(label: str, cases, results, channels, train_seconds: Optional[float]) -> List[MetricsRow]:
    predict = float(np.mean([r.seconds for r in results])) if results else None
    return [aggregate(label, target, sc, train_seconds, predict)
            for target, sc in _scores(cases, results, channels).items()]


def dump_case(root: Path, label: str, case: InferenceCase, res: CaseResult, channels: List[int]) -> None:
    d = case_dir(root, case.case_id)
    names = [case.truth.channel_names[c] for c in channels if case.truth.channel_names[c] in res.mean.channel_names]
    idx = [res.mean.channel_names.index(n) for n in names]
    t_idx = [case.truth.channel_names.index(n) for n in names]
    truth = case.truth.values[:, t_idx]
    mean, std = res.mean.values[:, idx], res.std.values[:, idx]
    layers = [truth, mean, std, np.abs(truth - mean)]
    write_dataset(Dataset.from_samples([(case.mesh, Field(v, tuple(names))) for v in layers]), d / f"{label}.gabd")
    if res.ensemble is not None:
        write_ensemble(res.ensemble, case.mesh, d / label)


def source_localization_rate(cases: Sequence[InferenceCase], results: Sequence[CaseResult], level: float = 0.1) -> float:
    """Share of cases whose posterior-mean forcing peaks inside the true bump (f >= level * max f)."""
    hits = 0
    for case, res in zip(cases, results):
        f_true = case.truth.channel("f")
        support = np.flatnonzero(f_true >= level * f_true.max())
        hits += int(np.argmax(res.mean.channel("f")) in set(support.tolist()))
    return hits / len(cases) if cases else 0.0


def latent_diagnostics(ckpt: Checkpoint, train: Dataset, seed: int) -> dict:
    Z = ckpt.autoencoder().encode_many(train.samples)
    r = stream(seed, DIAGNOSE)
    ref = r.standard_normal(Z.shape)
    out = latent_gaussianity(Z)
    if Z.shape[0] >= 2:
        out["mmd2"] = mmd2(Z, ref, median_bandwidth(Z, ref))
        out["mmd2_null_q99"] = mmd_null_threshold(Z.shape[0], Z.shape[1], r, reps=100)
    return out


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    run_dir: Path
    rows: List[MetricsRow]
    timings: Dict[str, float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None,
                   output_dir: Optional[str] = None) -> ExperimentResult:
    threads = threads or settings.threads
    missing = config.missing_files()
    if missing:
        raise ConfigError(f"referenced files do not exist: {missing}")
    root = run_dir(output_dir or config.output_dir, config.problem)
    write_audit(root, "config", config.model_dump())
    timings: Dict[str, float] = {}
    diagnostics: dict = {}
    rows: List[MetricsRow] = []

    with stage("generate", timings):
        train, test = prepare_data(config, threads)
        write_dataset(train, root / "data.gabd")
        cases = build_cases(config, test)
        channels = target_channels(config, train.n_channels)
    write_audit(root, "generate", {"n_train": len(train), "n_test": len(test), "seconds": timings["generate"]})

    trained = False
    with stage("train", timings):
        if config.checkpoint:
            ckpt = load_checkpoint(config.checkpoint)
            log.info("using checkpoint %s; training skipped", config.checkpoint)
        else:
            arch = config.model.architecture(train.samples[0][0].dim, train.n_channels)
            ckpt, trace = train_autoencoder(train, arch, config.train, stream(config.seed, TRAIN))
            save_checkpoint(ckpt, root / "model.gabw")
            trace.write_csv(root / "loss_trace.csv")
            trained = True
    train_seconds = timings["train"] if trained else None
    if trained:
        diagnostics["latent"] = latent_diagnostics(ckpt, train, config.seed)
    write_audit(root, "train", {"skipped": not trained, "seconds": timings["train"],
                                "config_digest": ckpt.config_digest})
    if config.observation.noise_mode == "infer":
        # reference: always answer the prior median
        prior_median = NoisePrior().median
        diagnostics["sigma_prior_median_mae"] = float(np.mean([abs(prior_median - c.sigma) for c in cases]))

    for m, method in enumerate(config.inference_methods):
        label = f"gabi-{method}"
        with stage(f"infer:{method}", timings):
            results = ordered_map(lambda c: infer_case(config, ckpt, c, method, stream(config.seed, INFER, m, c.case_id)),
                                  cases, threads)
            for case, res in zip(cases, results):
                dump_case(root, label, case, res, channels)
            if config.query_nodes and results:
                write_query_samples(results[0].ensemble, config.query_nodes, root / "query_samples.csv",
                                    channel=config.observation.channel)
        rows += method_rows(label, cases, results, channels, train_seconds)
        if config.problem == "helmholtz" and "f" in train.samples[0][1].channel_names:
            diagnostics[f"{label}_localization"] = source_localization_rate(cases, results)
        if config.observation.noise_mode == "infer":
            diagnostics[f"{label}_sigma_within_3x"] = float(np.mean(
                [1.0 / 3 <= r.sigma_median / c.sigma <= 3.0 for c, r in zip(cases, results)]))
            diagnostics[f"{label}_sigma_mae"] = float(np.mean(
                [abs(r.sigma_median - c.sigma) for c, r in zip(cases, results)]))
        write_audit(root, f"infer-{method}", {"cases": len(cases), "seconds": timings[f"infer:{method}"]})

    for kind in config.baselines.kinds:
        with stage(f"baseline:{kind}", timings):
            if kind == "direct":
                t0 = time.perf_counter()
                dm = train_direct_baseline(config, train)
                save_checkpoint(dm, root / "direct_map.gabw")
                base_train = time.perf_counter() - t0
                results = ordered_map(lambda c: direct_case(dm, c), cases, threads)
            else:
                base_train = None
                results = ordered_map(lambda c: gp_case(config, KIND_ALIASES[kind], c), cases, threads)
            for case, res in zip(cases, results):
                dump_case(root, kind, case, res, channels)
        rows += method_rows(kind, cases, results, channels, base_train)
        if kind == "direct" and config.problem == "helmholtz":
            diagnostics["direct_localization"] = source_localization_rate(cases, results)
        write_audit(root, f"baseline-{kind}", {"cases": len(cases), "seconds": timings[f"baseline:{kind}"]})

    with stage("evaluate", timings):
        (root / "metrics.csv").write_text(metrics_csv(rows, config.metrics), encoding="utf-8", newline="")
        (root / "timings.csv").write_text(timings_csv(rows), encoding="utf-8", newline="")
        (root / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True), encoding="utf-8")
    write_audit(root, "evaluate", {"rows": len(rows), "timings": timings})
    return ExperimentResult(root, rows, timings, diagnostics)
