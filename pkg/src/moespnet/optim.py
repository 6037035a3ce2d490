"""SGD with momentum, coupled weight decay, and polynomial learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from moespnet.tensor import ContractError, Tensor


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - it/max_iter) ** power, clamped to 0 past max_iter."""
    frac = min(max(it / max_iter, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


@dataclass
class SgdState:
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    max_iter: int = 1000
    iter: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.power <= 0 or self.max_iter < 1:
            raise ValueError("need weight_decay >= 0, power > 0, max_iter >= 1")

    @property
    def lr(self) -> float:
        return poly_lr(self.base_lr, self.iter, self.max_iter, self.power)


def sgd_step(state: SgdState, params: dict[str, Tensor], lr_mult: dict[str, float] | None = None) -> float:
    """One update: v = m*v - lr*(g + wd*p); p += v.  Returns the base lr used.

    ``lr_mult`` scales the step of individual parameters (missing names use 1).
    """
    if state.iter >= state.max_iter:
        raise ContractError(f"schedule exhausted: iter {state.iter} >= max_iter {state.max_iter}")
    lr = state.lr
    dt = None
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        dt = p.data.dtype.type
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        step = lr * (lr_mult.get(name, 1.0) if lr_mult else 1.0)
        v = dt(state.momentum) * v - dt(step) * (p.grad + dt(state.weight_decay) * p.data)
        state.velocity[name] = v
        p.data = p.data + v
    state.iter += 1
    return lr
