"""Nadam: Adam with a Nesterov look-ahead on the first moment (Dozat form)."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError


def nadam_update(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """One Nadam step; returns ``(value, m, v)`` as new arrays."""
    if t < 1:
        raise ValueError("step counter starts at 1")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** (t + 1))
    v_hat = v / (1 - beta2 ** t)
    step = (beta1 * m_hat + (1 - beta1) * grad / (1 - beta1 ** t)) / (np.sqrt(v_hat) + eps)
    return value - lr * step, m, v


class Nadam:
    def __init__(self, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-7):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, params):
        """Apply one update to every parameter, in place, using ``.grad``."""
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {p.name}")
        self.t += 1
        for p in params:
            value, p.m[...], p.v[...] = nadam_update(
                p.value, p.grad, p.m, p.v, self.t, self.lr, self.beta1, self.beta2, self.eps)
            p.value[...] = value
