"""Decoupled-weight-decay adaptive-moment optimizer and its LR schedule.

Defaults follow the training hyperparameter table: peak learning rate
7e-4, weight decay 0.1, 1000 linear warmup steps, cosine decay to 5e-6
over 300000 steps and held at the floor afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    lr: float = 7e-4
    weight_decay: float = 0.1
    warmup_steps: int = 1000
    cosine_decay_steps: int = 300_000
    min_lr: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        if self.warmup_steps > self.cosine_decay_steps:
            raise ValueError("warmup must end before cosine decay does")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "OptimizerConfig":
        return OptimizerConfig(**d)


def learning_rate(config: OptimizerConfig, step: int) -> float:
    """Linear warmup, then cosine decay to the floor."""
    if step <= 0:
        return 0.0
    if step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if step >= config.cosine_decay_steps:
        return config.min_lr
    t = (step - config.warmup_steps) / (config.cosine_decay_steps - config.warmup_steps)
    return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1.0 + math.cos(math.pi * t))


class MomentOptimizer:
    """Adaptive-moment update with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig | None = None):
        self.params = dict(params)
        self.config = config or OptimizerConfig()
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the LR used."""
        self.step_count += 1
        cfg = self.config
        lr = learning_rate(cfg, self.step_count)
        c1 = 1.0 - cfg.beta1 ** self.step_count
        c2 = 1.0 - cfg.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            denom = np.sqrt(v * (1.0 / c2))
            denom += cfg.eps
            update = m * (1.0 / c1)
            update /= denom
            if cfg.weight_decay:
                update += cfg.weight_decay * p.data
            update *= lr
            p.data -= update.astype(p.data.dtype, copy=False)
        return lr
