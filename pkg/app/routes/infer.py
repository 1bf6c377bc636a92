"""
Posterior sampling over a trained checkpoint.
"""

from functools import lru_cache
import logging

import numpy as np
from fastapi import APIRouter, HTTPException

from app.config import settings
from app.models.api import Geometry, InferRequest, PosteriorResponse, SigmaSummary
from app.services.checkpoint import Checkpoint, load_checkpoint
from app.services.errors import FormatError, GabiError
from app.services.geometry import Mesh, ObservationOperator, build_rectangle_mesh
from app.services.inversion import (InverseProblem, NoisePrior, abc_sample, abc_sample_joint_noise,
                                    posterior_stats)

log = logging.getLogger(__name__)
router = APIRouter()


@lru_cache(maxsize=1)
def _load(path: str) -> Checkpoint:
    return load_checkpoint(path)


def get_checkpoint() -> Checkpoint:
    if not settings.checkpoint_path:
        raise HTTPException(status_code=503, detail="no checkpoint configured (CHECKPOINT_PATH)")
    try:
        return _load(settings.checkpoint_path)
    except (OSError, FormatError) as e:
        log.error("cannot load checkpoint %s: %s", settings.checkpoint_path, e)
        raise HTTPException(status_code=503, detail=f"checkpoint unavailable: {e}")


def build_mesh(g: Geometry) -> Mesh:
    if g.l is not None:
        return build_rectangle_mesh(g.l, g.w, g.nx, g.ny)
    return Mesh(np.asarray(g.coords, dtype=np.float64), np.asarray(g.edges, dtype=np.int64))


def observation_of(req: InferRequest) -> ObservationOperator:
    return ObservationOperator(tuple(req.node_ids), req.channel, req.sigma or 0.0)


@router.post("", response_model=PosteriorResponse)
def infer(req: InferRequest) -> PosteriorResponse:
    ckpt = get_checkpoint()
    try:
        mesh = build_mesh(req.geometry)
        problem = InverseProblem(mesh, [observation_of(req)], req.y, ckpt.autoencoder(),
                                 noise_mode="infer" if req.infer_sigma else "known")
        rng = np.random.default_rng(req.seed)
        batch = min(100, req.n_samples)
        if req.infer_sigma:
            ens = abc_sample_joint_noise(problem, NoisePrior(), req.n_samples, req.n_accept, batch, rng)
        else:
            ens = abc_sample(problem, req.n_samples, req.n_accept, batch, rng)
        st = posterior_stats(ens)
    except (ValueError, IndexError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    except GabiError as e:
        log.error("inference failed: %s", e)
        raise HTTPException(status_code=500, detail=str(e))

    sigma = None
    if ens.sigmas is not None:
        sigma = SigmaSummary(mean=float(ens.sigmas.mean()), std=float(ens.sigmas.std(ddof=1)),
                             median=float(np.median(ens.sigmas)))
    return PosteriorResponse(
        channel_names=list(st.mean.channel_names),
        mean=st.mean.values.tolist(),
        std=st.std.values.tolist(),
        sigma=sigma,
        max_residual=float(ens.residuals.max()),
    )
