"""SGD with momentum, Adam, and the poly learning-rate schedule."""

from __future__ import annotations

from typing import Dict, Mapping, Tuple

import numpy as np

from .tensor import Tensor


def poly_lr(t: int, total: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - t/total)^power, clamped to 0 past the end."""
    if total <= 0:
        return lr0
    frac = min(max(t / total, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


def decays(name: str) -> bool:
    """Weight decay applies to convolution weights only (not biases or GeM exponents)."""
    return name.endswith(".weight")


class Optimizer:
    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.0):
        self.params: Dict[str, Tensor] = dict(sorted(params.items()))
        self.weight_decay = weight_decay
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _grad(self, name: str, p: Tensor) -> np.ndarray:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if self.weight_decay and decays(name):
            g = g + self.weight_decay * p.data
        return g

    def step(self, lr: float) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball momentum: v <- mu*v + g ; w <- w - lr*v."""

    kind = "sgd"

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, weight_decay)
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        for k, p in self.params.items():
            g = self._grad(k, p)
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= lr * v


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(params, weight_decay)
        self.betas = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for k, p in self.params.items():
            g = self._grad(k, p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            # lr * (m/c1) / (sqrt(v/c2) + eps)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= (lr / c1) * m / denom


def make_optimizer(kind: str, params, *, momentum: float = 0.9, weight_decay: float = 0.0,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> Optimizer:
    if kind == "sgd":
        return SGD(params, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
