import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.services.checkpoint import Checkpoint
from app.services.gcn import Architecture, init_params
from app.services.geometry import Mesh


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def five_node_mesh():
    coords = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]]
    edges = [[0, 1], [0, 2], [1, 3], [2, 3], [0, 4], [1, 4], [2, 4], [3, 4]]
    return Mesh(np.array(coords), np.array(edges))


@pytest.fixture
def tiny_arch():
    return Architecture(kind="autoencoder", dim=2, d_u=1, d_z=3, channels=4, n_layers=2)


@pytest.fixture
def tiny_checkpoint(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(7))
    return Checkpoint(tiny_arch, params, mean=np.array([0.3]), std=np.array([0.2]), channel_names=("u",))
