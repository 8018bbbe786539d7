"""Elementwise activations, the elapsed-time decay, and parameter storage."""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericError


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decay(delta):
    """Memory discount ``1 / ln(e + delta)`` for elapsed seconds ``delta``.

    Accepts a scalar or an array; returns the same kind.
    """
    d = np.asarray(delta, dtype=float)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("elapsed time must be non-negative")
    out = 1.0 / np.log(math.e + d)
    return float(out) if out.ndim == 0 else out


def check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Parameter:
    """A trainable array with its gradient and Nadam moment slots."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"
