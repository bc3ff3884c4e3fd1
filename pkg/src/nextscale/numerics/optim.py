"""Adaptive-moment optimizer with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamW:
    """Bias-corrected Adam with weight decay applied directly to the weights.

    Defaults follow the VAR training recipe (lr 1e-4, betas 0.95/0.95, decay 0.05).
    ``decay_mask`` selects which parameters are decayed (all by default).
    """

    params: list[Tensor]
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    decay_mask: list[bool] | None = None
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("AdamW: parameter registered twice")
        if self.decay_mask is None:
            self.decay_mask = [True] * len(self.params)
        if len(self.decay_mask) != len(self.params):
            raise ValueError("AdamW: decay_mask length does not match params")
        if not self.first_moment:
            self.first_moment = [np.zeros_like(p.data) for p in self.params]
            self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"AdamW: parameter {i} with shape {p.shape} has no grad")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v, decay in zip(self.params, self.first_moment, self.second_moment, self.decay_mask):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            w = p.data
            if decay and self.weight_decay:
                w = w * (1.0 - self.lr * self.weight_decay)
            p.data = (w - self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
