"""Optimizers and the optional cyclic learning-rate policy."""

from __future__ import annotations

import math

import numpy as np

from ..exceptions import MissingGradientError
from .nn import Parameter

__all__ = ["SGD", "Adam", "cyclic_lr", "clip_grad_norm"]


class _Optimizer:
    def __init__(self, params: list[Parameter], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def _check_grads(self) -> None:
        for p in self.params:
            if p.tensor.grad is None:
                raise MissingGradientError(f"parameter '{p.name}' has no gradient")

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None


class SGD(_Optimizer):
    def step(self) -> None:
        self._check_grads()
        for p in self.params:
            p.tensor.data -= self.lr * p.tensor.grad


class Adam(_Optimizer):
    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self._check_grads()
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.tensor.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.tensor.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def cyclic_lr(step: int, total_steps: int, base_lr: float,
              peak_ratio: float = 4.0, end_ratio: float = 1e-4) -> float:
    """One triangular cycle: base -> base*peak_ratio at 40% -> base*end_ratio."""
    if total_steps <= 1:
        return base_lr
    up = max(1, int(0.4 * total_steps))
    if step < up:
        frac = step / up
        return base_lr * (1.0 + (peak_ratio - 1.0) * frac)
    frac = (step - up) / max(1, total_steps - up)
    peak = base_lr * peak_ratio
    return peak + (base_lr * end_ratio - peak) * frac


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for p in params:
        if p.tensor.grad is not None:
            sq += float((p.tensor.grad**2).sum())
    norm = math.sqrt(sq)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.tensor.grad is not None:
                p.tensor.grad *= scale
    return norm
