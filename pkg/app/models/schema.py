from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.services.gcn import Architecture
from app.services.presets import get_preset


class StrictModel(BaseModel):
    # unknown keys in experiment configs are a hard error
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(StrictModel):
    n_train: int = Field(200, ge=1)
    n_test: int = Field(100, ge=0)
    nx: int = Field(33, ge=3, description="heat grid vertices along x")
    ny: int = Field(33, ge=3, description="heat grid vertices along y")
    n_nodes: int = Field(30, ge=5, description="Helmholtz graph size")
    kappa: float = Field(4.0, gt=0)
    gamma: float = Field(0.2, gt=0, lt=1)
    k_neighbors: int = Field(5, ge=1)
    path: Optional[str] = Field(None, description="existing GABD file to use instead of generating")


class ModelConfig(StrictModel):
    preset: Literal["tiny", "desk", "full"] = "desk"
    channels: Optional[int] = Field(None, ge=1)
    n_layers: Optional[int] = Field(None, ge=1)
    d_z: Optional[int] = Field(None, ge=1)
    activation: Literal["tanh", "relu"] = "tanh"

    def architecture(self, dim: int, d_u: int, kind: str = "autoencoder", obs_channel: int = 0) -> Architecture:
        p = get_preset(self.preset)
        return Architecture(kind=kind, dim=dim, d_u=d_u,
                            d_z=self.d_z or p.d_z,
                            channels=self.channels or p.channels,
                            n_layers=self.n_layers or p.n_layers,
                            activation=self.activation, obs_channel=obs_channel)


class TrainConfig(StrictModel):
    iterations: int = Field(3000, ge=1)
    batch_size: int = Field(100, ge=1)
    lr: float = Field(1e-3, gt=0)
    mmd_weight: float = Field(1.0, ge=0)
    lr_decay: Optional[float] = Field(None, gt=0, le=1, description="per-iteration exponential decay, e.g. 0.999")
    log_every: int = Field(100, ge=1)


class SamplerConfig(StrictModel):
    method: Literal["abc", "pcn"] = "abc"
    n_samples: int = Field(10_000, ge=1)
    n_accept: int = Field(100, ge=1)
    batch: int = Field(100, ge=1)
    beta: float = Field(0.2, gt=0, le=1)
    n_steps: int = Field(20_000, ge=1)
    burn_in: int = Field(2_000, ge=0)
    thin: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _accept_within_budget(self):
        if self.n_accept > self.n_samples:
            raise ValueError("n_accept must not exceed n_samples")
        return self


class ObservationConfig(StrictModel):
    count: int = Field(10, ge=0)
    count_distribution: Literal["fixed", "inverse"] = "fixed"
    count_min: int = Field(5, ge=1)
    count_max: int = Field(50, ge=1)
    sigma: float = Field(1e-2, ge=0)
    noise_mode: Literal["known", "infer"] = "known"
    channel: int = Field(0, ge=0, description="observed field channel")
    target_channels: Optional[List[int]] = Field(None, description="channels scored by the metrics (default: all)")


class BaselineConfig(StrictModel):
    kinds: List[Literal["direct", "gp-m12", "gp-m32", "gp-rbf"]] = Field(default_factory=list)
    direct_iterations: int = Field(2000, ge=1)
    direct_batch_size: int = Field(20, ge=1)
    gp_grid_size: int = Field(20, ge=1)
    gp_sigma_grid: Optional[List[float]] = None


class ExperimentConfig(StrictModel):
    problem: Literal["heat", "helmholtz"] = "heat"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    observation: ObservationConfig = Field(default_factory=ObservationConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)
    methods: Optional[List[Literal["abc", "pcn"]]] = Field(
        None, description="samplers to run and compare; defaults to [sampler.method]")
    metrics: List[Literal["mae", "cov1", "cov2"]] = Field(default_factory=lambda: ["mae", "cov1", "cov2"])
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "runs/experiment"
    checkpoint: Optional[str] = Field(None, description="pre-trained GABW checkpoint; skips training")
    query_nodes: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _pcn_needs_known_sigma(self):
        if "pcn" in self.inference_methods and self.observation.noise_mode == "infer":
            raise ValueError("pcn sampling needs observation.noise_mode = 'known'")
        return self

    @field_validator("methods")
    @classmethod
    def _nonempty(cls, v):
        if v is not None and not v:
            raise ValueError("at least one inference method is required")
        return v

    @model_validator(mode="after")
    def _one_method_source(self):
        # an explicit sampler.method must lead an explicit methods list
        if self.methods and "method" in self.sampler.model_fields_set and self.methods[0] != self.sampler.method:
            raise ValueError(f"sampler.method={self.sampler.method!r} conflicts with methods={self.methods}")
        return self

    @property
    def inference_methods(self) -> List[str]:
        return list(self.methods) if self.methods else [self.sampler.method]

    def missing_files(self) -> List[str]:
        refs = [p for p in (self.checkpoint, self.dataset.path) if p]
        return [p for p in refs if not Path(p).exists()]
