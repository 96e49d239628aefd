"""Adam optimizer over Tensor parameters.

Frozen tensors (``requires_grad == False``) are never touched, bitwise:
``step`` skips them even if a gradient is somehow attached.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def adam_update(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float, beta2: float, eps: float):
    """One Adam step on raw arrays; returns (new_value, new_m, new_v) functionally."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_value, m, v


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"Adam: lr must be positive, got {lr}")
        self.params = list(params)
        self.base_lr = float(lr)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def set_cosine_lr(self, step: int, total_steps: int):
        """Cosine decay from base_lr to 0 over total_steps."""
        frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
        self.lr = self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            grad = p.grad.astype(p.data.dtype, copy=False)
            new_value, m, v = adam_update(p.data, grad, self._m[id(p)], self._v[id(p)],
                                          self.t, self.lr, self.beta1, self.beta2, self.eps)
            p.data = new_value.astype(p.data.dtype, copy=False)
            self._m[id(p)] = m
            self._v[id(p)] = v
