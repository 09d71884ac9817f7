"""RMSprop parameter updates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class RmspropState:
    """Per-parameter squared-gradient accumulators plus the update hyperparameters."""

    learning_rate: float
    rho: float = 0.9
    eps: float = 1e-8
    acc: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate: float,
                   rho: float = 0.9, eps: float = 1e-8) -> "RmspropState":
        state = cls(learning_rate=learning_rate, rho=rho, eps=eps)
        state.acc = [np.zeros_like(p.data) for p in params]
        return state


def rmsprop_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None,
                 state: RmspropState) -> Sequence[Tensor]:
    """Update ``params`` in place from ``grads`` (defaults to each ``param.grad``).

    acc <- rho * acc + (1 - rho) * g^2
    param <- param - lr * g / (sqrt(acc) + eps)
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.acc) != len(params):
        raise DimensionError(
            f"rmsprop_step got {len(params)} params, {len(grads)} grads, "
            f"{len(state.acc)} accumulators")
    for p, g, a in zip(params, grads, state.acc):
        if g is None:
            raise DimensionError("rmsprop_step found a parameter with no gradient")
        if g.shape != p.data.shape or a.shape != p.data.shape:
            raise DimensionError(
                f"rmsprop_step shape mismatch: param {p.data.shape}, "
                f"grad {g.shape}, acc {a.shape}")
        a *= state.rho
        a += (1.0 - state.rho) * g * g
        p.data -= state.learning_rate * g / (np.sqrt(a) + state.eps)
    return params
