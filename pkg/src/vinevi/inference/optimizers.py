"""Gradient-ascent optimizers."""

from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.t = 0

    def step(self, params, grad) -> np.ndarray:
        params, grad = np.asarray(params, dtype=float), np.asarray(grad, dtype=float)
        if params.shape != grad.shape:
            raise ValueError("params and grad differ in shape")
        self.t += 1
        return params + self.lr * grad


class Adam:
    """Adam with bias correction, oriented for ascent."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grad) -> np.ndarray:
        params, grad = np.asarray(params, dtype=float), np.asarray(grad, dtype=float)
        if params.shape != grad.shape:
            raise ValueError("params and grad differ in shape")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, lr: float):
    kind = kind.lower()
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(state, params, grad) -> np.ndarray:
    return state.step(params, grad)
