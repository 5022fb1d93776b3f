"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    total_epochs: int = 300
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.min_lr > self.base_lr:
            raise ValueError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup must be shorter than the whole run")


def scaled_base_lr(batch_size: int) -> float:
    """Reference scaling rule: 1e-3 * batch_size / 1024."""
    return 1e-3 * batch_size / 1024


def lr_at(step: int, s: Schedule) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to min_lr.

    Steps past the end of the schedule clamp to min_lr.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warm = s.warmup_epochs * s.steps_per_epoch
    total = s.total_epochs * s.steps_per_epoch
    if warm > 0 and step < warm:
        return s.base_lr * step / warm
    if step >= total:
        return s.min_lr
    t = (step - warm) / max(total - warm, 1)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)
