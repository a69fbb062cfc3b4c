"""In-place parameter updates: plain SGD and Adam."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


def _check_pairs(params: list[Tensor], grads: list[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise DimensionError(f"param shape {p.data.shape} vs grad shape {g.shape}")


def sgd_step(params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
    if lr <= 0:
        raise ContractError(f"lr must be > 0, got {lr}")
    _check_pairs(params, grads)
    for p, g in zip(params, grads):
        p.data -= lr * g


class Adam:
    """Adam with bias correction; moment buffers persist across steps."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ContractError(f"lr must be > 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[Tensor], grads: list[np.ndarray]) -> None:
        _check_pairs(params, grads)
        if self._m is None:
            self._m = [np.zeros_like(p.data) for p in params]
            self._v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


def collect_grads(params: list[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
