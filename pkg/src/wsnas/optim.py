"""SGD with momentum and Adam, operating in place on parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor

__all__ = ["SgdConfig", "AdamConfig", "Sgd", "Adam", "clip_grad_norm"]


def clip_grad_norm(params: Sequence["Tensor"], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 6e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-3
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def _require_grads(params: Sequence[Tensor], opt: str) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"{opt}: parameter {i} has no gradient; run backward first")


class Sgd:
    """Momentum SGD: v <- momentum*v + grad + wd*param; param <- param - lr*v."""

    def __init__(self, params: Sequence[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        _require_grads(self.params, "sgd_step")
        cfg = self.cfg
        for p, v in zip(self.params, self.velocity):
            grad = p.grad
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * p.data
            v *= cfg.momentum
            v += grad
            p.data -= cfg.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Bias-corrected Adam with classic L2 decay folded into the gradient.

    Weight decay is added to the gradient before the moment updates (the
    behaviour the DARTS lineage uses), not applied decoupled-AdamW style.
    """

    def __init__(self, params: Sequence[Tensor], cfg: AdamConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        _require_grads(self.params, "adam_step")
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            grad = p.grad
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * p.data
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
