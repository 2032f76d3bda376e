"""Adam/AdamW and cosine annealing with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from luve.numerics import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)


def AdamW(params, lr=1e-3, weight_decay=1e-2, **kw) -> Adam:
    return Adam(params, lr=lr, weight_decay=weight_decay, decoupled=True, **kw)


@dataclass
class CosineRestarts:
    """``lr = eta_min + (base - eta_min) * (1 + cos(pi * t_cur / period)) / 2``."""

    base_lr: float
    period: int
    eta_min: float = 0.0

    def __call__(self, step: int) -> float:
        t_cur = step % self.period
        return self.eta_min + 0.5 * (self.base_lr - self.eta_min) * (1.0 + math.cos(math.pi * t_cur / self.period))
