"""Optimizers and the learning-rate schedule shared by both training stages."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"            # "sgd" (momentum) or "adam"
    lr: float = 0.3
    momentum: float = 0.9
    warmup_frac: float = 0.1     # fraction of total steps spent in linear warmup
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind: {self.kind!r}")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must lie in [0, 1]")


def lr_at(cfg: OptimizerConfig, step: int, total_steps: int) -> float:
    """Linear warmup to cfg.lr, then half-period cosine decay to 0.

    ``step`` counts from 0; warmup occupies ceil(warmup_frac * total_steps)
    steps, with lr rising linearly from lr/warmup to lr.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = math.ceil(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    tau = (step - warmup) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * tau))


class Optimizer:
    """Stateful parameter updater; mutates the tensor dict it is given."""

    def __init__(self, cfg: OptimizerConfig, tensors: dict[str, np.ndarray], total_steps: int):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.cfg = cfg
        self.total_steps = total_steps
        self.step_count = 0
        self._buf = {k: np.zeros_like(v) for k, v in tensors.items()}
        if cfg.kind == "adam":
            self._v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the learning rate that was used."""
        lr = lr_at(self.cfg, self.step_count, self.total_steps)
        self.step_count += 1
        if self.cfg.kind == "sgd":
            mu = self.cfg.momentum
            for name, g in grads.items():
                buf = self._buf[name]
                buf *= mu
                buf += g
                tensors[name] -= lr * buf
        else:
            b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
            t = self.step_count
            for name, g in grads.items():
                m = self._buf[name]
                v = self._v[name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                mhat = m / (1.0 - b1 ** t)
                vhat = v / (1.0 - b2 ** t)
                tensors[name] -= lr * mhat / (np.sqrt(vhat) + eps)
        return lr
