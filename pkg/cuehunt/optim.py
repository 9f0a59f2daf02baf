from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError, ShapeError


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationError(f"Adam learning rate must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.t < 0:
            raise ConfigurationError(f"Adam step counter must be >= 0, got {self.t}")

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
            **hyper,
        )

    def copy(self) -> "AdamState":
        return replace(
            self,
            m={name: a.copy() for name, a in self.m.items()},
            v={name: a.copy() for name, a in self.v.items()},
        )

    def hyperparameters(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"adam_step: no gradient for parameter '{name}'")
        g = grads[name]
        m, v = state.m.get(name), state.v.get(name)
        if m is None or v is None:
            raise ContractError(f"adam_step: optimizer state has no moments for '{name}'")
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(
                f"adam_step: shape mismatch for '{name}': param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}"
            )
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, t=t)
