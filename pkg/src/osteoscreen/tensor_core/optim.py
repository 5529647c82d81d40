"""SGD with heavy-ball momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..errors import InputError, StateError
from .tensor import Tensor


@dataclass
class SgdState:
    """Velocity buffers for one parameter group sharing a learning rate."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0001
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InputError(f"weight decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]], state: SgdState) -> None:
    """Apply one update in place and clear the gradients.

    ``v <- momentum * v + grad + weight_decay * param``, then
    ``param <- param - lr * v``.
    """
    items = list(params.items() if isinstance(params, Mapping) else params)
    for name, p in items:
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    dt = items[0][1].dtype.type if items else np.float64
    lr, mom, wd = dt(state.learning_rate), dt(state.momentum), dt(state.weight_decay)
    for name, p in items:
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise StateError(f"velocity for {name!r} has shape {v.shape}, parameter {p.shape}")
        v *= mom
        v += p.grad
        if wd:
            v += wd * p.data
        p.data -= lr * v
        p.grad = None
