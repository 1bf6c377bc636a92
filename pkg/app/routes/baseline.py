"""
Graph GP baseline on request geometry; needs no checkpoint.
"""

import logging

import numpy as np
from fastapi import APIRouter, HTTPException

from app.models.api import GpRequest, GpResponse
from app.routes.infer import build_mesh, observation_of
from app.services.errors import GabiError
from app.services.graph_gp import gp_fit_mml, gp_posterior

log = logging.getLogger(__name__)
router = APIRouter()


@router.post("/gp", response_model=GpResponse)
def gp(req: GpRequest) -> GpResponse:
    try:
        mesh = build_mesh(req.geometry)
        obs = observation_of(req)
        obs.check(mesh.n_nodes, req.channel + 1)
        grid = tuple(np.logspace(-2, 1, req.grid_size))
        sigma_grid = tuple(np.logspace(-3, 0, 10)) if req.infer_sigma else None
        model = gp_fit_mml(mesh, obs, req.y, req.kind, grid, grid, sigma_grid)
        mean, std = gp_posterior(model, mesh, obs, req.y)
    except (ValueError, IndexError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    except GabiError as e:
        log.error("gp baseline failed: %s", e)
        raise HTTPException(status_code=500, detail=str(e))
    return GpResponse(
        channel_names=list(mean.channel_names),
        mean=mean.values.tolist(),
        std=std.values.tolist(),
        sigma_f=model.sigma_f,
        lengthscale=model.lengthscale,
        noise_sigma=model.noise_sigma,
        notes=f"kernel {model.kind}",
    )
