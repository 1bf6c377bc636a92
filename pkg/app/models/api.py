from pydantic import BaseModel, Field, model_validator
from typing import List, Literal, Optional


class Geometry(BaseModel):
    """Either a rectangle (l, w, nx, ny) or explicit coords/edges."""
    l: Optional[float] = Field(None, gt=0)
    w: Optional[float] = Field(None, gt=0)
    nx: int = Field(33, ge=2)
    ny: int = Field(33, ge=2)
    coords: Optional[List[List[float]]] = None
    edges: Optional[List[List[int]]] = None

    @model_validator(mode="after")
    def _one_form(self):
        rect = self.l is not None and self.w is not None
        explicit = self.coords is not None and self.edges is not None
        if rect == explicit:
            raise ValueError("give either l and w, or coords and edges")
        return self


class InferRequest(BaseModel):
    geometry: Geometry
    node_ids: List[int]
    y: List[float]
    channel: int = 0
    sigma: Optional[float] = Field(None, gt=0)
    infer_sigma: bool = False
    n_samples: int = Field(10_000, ge=1, le=200_000)
    n_accept: int = Field(100, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _noise(self):
        if len(self.y) != len(self.node_ids):
            raise ValueError("y and node_ids must have the same length")
        if not self.infer_sigma and self.sigma is None:
            raise ValueError("sigma is required unless infer_sigma is set")
        if self.n_accept > self.n_samples:
            raise ValueError("n_accept must not exceed n_samples")
        return self


class SigmaSummary(BaseModel):
    mean: float
    std: float
    median: float


class PosteriorResponse(BaseModel):
    channel_names: List[str]
    mean: List[List[float]]
    std: List[List[float]]
    sigma: Optional[SigmaSummary] = None
    max_residual: Optional[float] = None
    notes: Optional[str] = None


class GpRequest(InferRequest):
    kind: Literal["matern-1/2", "matern-3/2", "rbf", "gp-m12", "gp-m32", "gp-rbf"] = "matern-3/2"
    grid_size: int = Field(20, ge=1, le=50)


class GpResponse(PosteriorResponse):
    sigma_f: float
    lengthscale: float
    noise_sigma: float
