"""
Adam optimizer over named float64 parameter arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

Params = Dict[str, np.ndarray]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def for_params(cls, params: Params, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(state: AdamState, params: Params, grads: Params) -> Params:
    """One bias-corrected Adam update. Returns new parameter arrays; `state` is advanced in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatchError("adam_step", f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ShapeMismatchError("adam_step", f"{name}: moment {state.m[name].shape} vs param {p.shape}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    updated: Params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"adam_step({name})")
        updated[name] = new
    return updated
