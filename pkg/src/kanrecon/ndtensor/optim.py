"""Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from kanrecon.ndtensor.tensor import ShapeError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not state.m:
        state = AdamState.for_params(params)
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer state tracks {len(state.m)} params, got {len(params)}")
    step = state.step + 1
    c1 = 1.0 - BETA1 ** step
    c2 = 1.0 - BETA2 ** step
    for p, m, v in zip(params, state.m, state.v):
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    state.step = step
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 2.5e-5):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def step(self, grads: Dict[Tensor, np.ndarray] = None) -> None:
        if grads is None:
            grads = {p: p.grad for p in self.params if p.grad is not None}
        self.state = adam_step(self.params, grads, self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
