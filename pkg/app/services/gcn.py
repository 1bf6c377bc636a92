"""
Graph convolutional encoder/decoder with nonlocal averaging.

Each layer sees [features || graph-wide channel mean] and applies
act(A_hat @ ([X || mean(X)] @ W) + b). The encoder maps node inputs
[coords || u] to a latent vector by averaging its last layer over nodes; the
decoder maps [coords || z] back to node values. The same node regressor also
serves the direct-map baseline.

Two evaluation paths share these definitions:
  * Tensor path (autodiff), used for training and gradient checks;
  * numpy path, batched over latent samples, used for inference.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np
import scipy.sparse as sps

from . import autodiff as ad
from .errors import NonFiniteError, ShapeMismatchError
from .geometry import Field, GraphOperator, Mesh

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class Architecture:
    kind: str = "autoencoder"        # "autoencoder" | "direct-map"
    dim: int = 2                     # coordinate dimension d
    d_u: int = 1
    d_z: int = 32
    channels: int = 64
    n_layers: int = 4
    activation: str = "tanh"
    obs_channel: int = 0             # direct-map only

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)

    @property
    def regressor_in(self) -> int:
        """Width of the node inputs of the decoder / direct map."""
        if self.kind == "direct-map":
            return self.dim + 2
        return self.dim + self.d_z


def expected_shapes(arch: Architecture) -> Dict[str, tuple]:
    c = arch.channels
    shapes: Dict[str, tuple] = {}
    if arch.kind == "autoencoder":
        shapes["enc.in.W"] = (arch.dim + arch.d_u, c)
        shapes["enc.in.b"] = (1, c)
        for k in range(arch.n_layers):
            c_out = arch.d_z if k == arch.n_layers - 1 else c
            shapes[f"enc.l{k}.W"] = (2 * c, c_out)
            shapes[f"enc.l{k}.b"] = (1, c_out)
    prefix = "dec" if arch.kind == "autoencoder" else "dm"
    shapes[f"{prefix}.in.W"] = (arch.regressor_in, c)
    shapes[f"{prefix}.in.b"] = (1, c)
    for k in range(arch.n_layers):
        shapes[f"{prefix}.l{k}.W"] = (2 * c, c)
        shapes[f"{prefix}.l{k}.b"] = (1, c)
    shapes[f"{prefix}.out.W"] = (c, arch.d_u)
    shapes[f"{prefix}.out.b"] = (1, arch.d_u)
    return shapes


def init_params(arch: Architecture, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases."""
    params: Params = {}
    for name, shape in expected_shapes(arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def _propagation_matrix(a_hat):
    if isinstance(a_hat, GraphOperator):
        return a_hat.matrix
    return a_hat


# ---------------------------------------------------------------------------
# tensor path
# ---------------------------------------------------------------------------

def _act_t(h: ad.Tensor, activation: Optional[str]) -> ad.Tensor:
    if activation == "tanh":
        return ad.tanh(h)
    if activation == "relu":
        return ad.relu(h)
    return h


def _propagate_t(a, h: ad.Tensor) -> ad.Tensor:
    if sps.issparse(a):
        return ad.matmul(a, h)
    if isinstance(a, ad.Tensor):
        return ad.matmul(a, h)
    return ad.matmul(ad.tensor(a), h)


def gcn_nonlocal_layer_apply(a_hat, x: ad.Tensor, w: ad.Tensor, b: ad.Tensor,
                             activation: Optional[str] = "tanh") -> ad.Tensor:
    """act(A_hat [X || broadcast(mean_rows(X))] W + b) for an (N, c_in) feature tensor."""
    n, c_in = x.shape
    if w.shape[0] != 2 * c_in:
        raise ShapeMismatchError("gcn_nonlocal_layer", f"weight {w.shape} for {c_in} input channels")
    a = _propagation_matrix(a_hat)
    if a.shape != (n, n):
        raise ShapeMismatchError("gcn_nonlocal_layer", f"operator {a.shape} for {n} nodes")
    h = ad.concat([x, ad.broadcast_row(ad.mean(x, axis=0), n)], axis=1)
    h = _propagate_t(a, ad.matmul(h, w))
    h = ad.add(h, ad.broadcast_row(b, n))
    return _act_t(h, activation)


def _linear_t(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, w), ad.broadcast_row(b, x.shape[0]))


def encoder_tensor(mesh: Mesh, u_norm: np.ndarray, P: Dict[str, ad.Tensor], arch: Architecture) -> ad.Tensor:
    """Encoder on one mesh; returns a (1, d_z) latent."""
    a = _propagation_matrix(mesh.adjacency())
    x = ad.tensor(np.hstack([mesh.coords, u_norm]))
    h = _act_t(_linear_t(x, P["enc.in.W"], P["enc.in.b"]), arch.activation)
    for k in range(arch.n_layers):
        # the last layer stays linear so latents are not confined to (-1, 1)
        act = arch.activation if k < arch.n_layers - 1 else None
        h = gcn_nonlocal_layer_apply(a, h, P[f"enc.l{k}.W"], P[f"enc.l{k}.b"], act)
    return ad.mean(h, axis=0)


def regressor_tensor(mesh: Mesh, x: ad.Tensor, P: Dict[str, ad.Tensor], arch: Architecture,
                     prefix: str) -> ad.Tensor:
    a = _propagation_matrix(mesh.adjacency())
    h = _act_t(_linear_t(x, P[f"{prefix}.in.W"], P[f"{prefix}.in.b"]), arch.activation)
    for k in range(arch.n_layers):
        h = gcn_nonlocal_layer_apply(a, h, P[f"{prefix}.l{k}.W"], P[f"{prefix}.l{k}.b"], arch.activation)
    return _linear_t(h, P[f"{prefix}.out.W"], P[f"{prefix}.out.b"])


def decoder_tensor(mesh: Mesh, z: ad.Tensor, P: Dict[str, ad.Tensor], arch: Architecture) -> ad.Tensor:
    """Decoder on one mesh from a (1, d_z) latent; returns normalized (N, d_u) values."""
    x = ad.concat([ad.tensor(mesh.coords), ad.broadcast_row(z, mesh.n_nodes)], axis=1)
    return regressor_tensor(mesh, x, P, arch, "dec")


# ---------------------------------------------------------------------------
# numpy path (batched over a leading axis)
# ---------------------------------------------------------------------------

def _act_np(h: np.ndarray, activation: Optional[str]) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(h)
    if activation == "relu":
        return np.maximum(h, 0.0)
    return h


def _propagate_np(a, h: np.ndarray) -> np.ndarray:
    """A @ h for h of shape (B, N, k)."""
    if sps.issparse(a):
        b, n, k = h.shape
        flat = np.moveaxis(h, 1, 0).reshape(n, b * k)
        return np.moveaxis(np.asarray(a @ flat).reshape(n, b, k), 0, 1)
    return np.matmul(a, h)


def _layer_np(a, h: np.ndarray, w: np.ndarray, b: np.ndarray, activation: Optional[str]) -> np.ndarray:
    m = np.broadcast_to(h.mean(axis=1, keepdims=True), h.shape)
    hc = np.concatenate([h, m], axis=2)
    return _act_np(_propagate_np(a, np.matmul(hc, w)) + b, activation)


def _regressor_np(mesh: Mesh, x: np.ndarray, params: Params, arch: Architecture, prefix: str) -> np.ndarray:
    a = _propagation_matrix(mesh.adjacency())
    h = _act_np(np.matmul(x, params[f"{prefix}.in.W"]) + params[f"{prefix}.in.b"], arch.activation)
    for k in range(arch.n_layers):
        h = _layer_np(a, h, params[f"{prefix}.l{k}.W"], params[f"{prefix}.l{k}.b"], arch.activation)
    return np.matmul(h, params[f"{prefix}.out.W"]) + params[f"{prefix}.out.b"]


def encode_batch(mesh: Mesh, u_norm: np.ndarray, params: Params, arch: Architecture) -> np.ndarray:
    """(B, N, d_u) normalized fields on one mesh -> (B, d_z)."""
    u_norm = np.asarray(u_norm, dtype=np.float64)
    if u_norm.ndim == 2:
        u_norm = u_norm[None]
    b = u_norm.shape[0]
    coords = np.broadcast_to(mesh.coords, (b,) + mesh.coords.shape)
    x = np.concatenate([coords, u_norm], axis=2)
    a = _propagation_matrix(mesh.adjacency())
    h = _act_np(np.matmul(x, params["enc.in.W"]) + params["enc.in.b"], arch.activation)
    for k in range(arch.n_layers):
        act = arch.activation if k < arch.n_layers - 1 else None
        h = _layer_np(a, h, params[f"enc.l{k}.W"], params[f"enc.l{k}.b"], act)
    z = h.mean(axis=1)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("encode")
    return z


def decode_batch_normalized(mesh: Mesh, Z: np.ndarray, params: Params, arch: Architecture) -> np.ndarray:
    """(B, d_z) latents -> (B, N, d_u) normalized values."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    b = Z.shape[0]
    coords = np.broadcast_to(mesh.coords, (b,) + mesh.coords.shape)
    zb = np.broadcast_to(Z[:, None, :], (b, mesh.n_nodes, Z.shape[1]))
    out = _regressor_np(mesh, np.concatenate([coords, zb], axis=2), params, arch, "dec")
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("decode")
    return out


def regress_np(mesh: Mesh, x: np.ndarray, params: Params, arch: Architecture, prefix: str) -> np.ndarray:
    return _regressor_np(mesh, x[None] if x.ndim == 2 else x, params, arch, prefix)


# ---------------------------------------------------------------------------
# field-level API
# ---------------------------------------------------------------------------

def encode(u_norm: np.ndarray, mesh: Mesh, params: Params, arch: Architecture) -> np.ndarray:
    """Latent vector of one normalized field."""
    return encode_batch(mesh, np.asarray(u_norm, dtype=np.float64).reshape(mesh.n_nodes, -1), params, arch)[0]


def decode(z: np.ndarray, mesh: Mesh, params: Params, arch: Architecture, mean: np.ndarray,
           std: np.ndarray, channel_names: Optional[tuple] = None) -> Field:
    out = decode_batch_normalized(mesh, np.asarray(z).reshape(1, -1), params, arch)[0]
    names = channel_names or tuple(f"c{k}" for k in range(arch.d_u))
    return Field(out * std + mean, names)


class GeometricAutoencoder:
    """Trained parameters plus the normalization they were trained with."""

    def __init__(self, arch: Architecture, params: Params, mean: np.ndarray, std: np.ndarray,
                 channel_names: Optional[tuple] = None):
        self.arch = arch
        self.params = params
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.channel_names = channel_names or tuple(f"c{k}" for k in range(arch.d_u))

    @property
    def d_z(self) -> int:
        return self.arch.d_z

    def encode(self, field: Field, mesh: Mesh) -> np.ndarray:
        return encode((field.values - self.mean) / self.std, mesh, self.params, self.arch)

    def encode_many(self, samples: List[tuple]) -> np.ndarray:
        return np.vstack([self.encode(f, m) for m, f in samples])

    def decode(self, z: np.ndarray, mesh: Mesh) -> Field:
        return decode(z, mesh, self.params, self.arch, self.mean, self.std, self.channel_names)

    def decode_batch(self, Z: np.ndarray, mesh: Mesh) -> np.ndarray:
        """(B, d_z) -> (B, N, d_u) in field units."""
        return decode_batch_normalized(mesh, Z, self.params, self.arch) * self.std + self.mean
