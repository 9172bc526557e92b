"""
Optim: Adam with bias correction.

Contract: nn-core v1.0.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class AdamState:
    """Adam moments per parameter name plus the step counter."""
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must be in [0, 1)")

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], lr: float = 3e-4, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state

    def snapshot(self) -> dict[str, np.ndarray]:
        """Flat array map suitable for the checkpoint container."""
        out = {"adam/step": np.array([self.step], dtype=np.int64)}
        for name in self.m:
            out[f"adam/m/{name}"] = self.m[name].copy()
            out[f"adam/v/{name}"] = self.v[name].copy()
        return out


def adam_step(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> tuple[Mapping[str, np.ndarray], AdamState]:
    """
    One Adam update, applied to the parameter arrays in place.

    Returns (params, state) so callers can chain; the step counter increments
    once per call.
    """
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise ShapeError(f"gradient keys do not match parameters: missing {missing}, unexpected {extra}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"{name}: moment shape {m.shape} != parameter shape {p.shape}")

        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)

        m_hat = m / correction1
        v_hat = v / correction2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)

    return params, state
