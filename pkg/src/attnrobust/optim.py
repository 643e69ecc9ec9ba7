"""AdamW with a linear-warmup cosine-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class CosineSchedule:
    """Linear warmup from 0 to ``base_lr`` then cosine decay to ``min_lr``."""

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    ``no_decay`` names parameters exempt from weight decay (biases, norms,
    tokens, LayerScale). State lives on the instance; :meth:`step` mutates
    parameter arrays in place.
    """

    params: dict[str, Tensor]
    schedule: CosineSchedule
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    no_decay: frozenset[str] = frozenset()
    grad_clip: float | None = 1.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def current_lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        lr = self.current_lr()
        self.step_count += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.grad_clip is not None and grads:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / (norm + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        if lr == 0.0:
            return lr
        b1, b2 = self.betas
        t = self.step_count
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and name not in self.no_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        return lr
