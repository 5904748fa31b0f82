"""Adam with linear warmup, restricted to an explicit parameter list."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup_steps: int = 1000
    grad_clip: float = 0.0  # 0 disables global-norm clipping


class Adam:
    """Only the tensors passed in are ever touched; anything else stays bit-identical."""

    def __init__(self, params: Sequence[Tensor], config: AdamConfig | None = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def current_lr(self) -> float:
        c = self.config
        if c.warmup_steps > 0:
            return c.lr * min(1.0, (self.step_count + 1) / c.warmup_steps)
        return c.lr

    def step(self) -> None:
        c = self.config
        lr = self.current_lr()
        self.step_count += 1
        if lr == 0.0:
            return
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if c.grad_clip > 0:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
            if norm > c.grad_clip:
                grads = [g * (c.grad_clip / norm) for g in grads]
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            update = lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
            p.data = p.data - update
