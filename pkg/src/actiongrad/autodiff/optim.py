"""Adam for network parameters (training only)."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from actiongrad.autodiff.tensor import Gradients, Tensor


class Adam:
    """Bias-corrected Adam that updates ``Tensor.data`` in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Gradients | Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = grads[p] if isinstance(grads, Gradients) else grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def adam_param_step(params: Mapping[str, Tensor], grads, state: Adam, lr: float | None = None):
    """Functional wrapper: apply one Adam step with ``state`` and return ``params``."""
    if lr is not None:
        state.lr = lr
    state.step(grads)
    return params
