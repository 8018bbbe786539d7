"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numerical_gradient(loss_fn, arr, eps=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=float)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        plus = loss_fn()
        arr[i] = old - eps
        minus = loss_fn()
        arr[i] = old
        grad[i] = (plus - minus) / (2 * eps)
    return grad


def gradient_errors(f, params, eps=1e-5):
    """Max relative error per parameter.

    ``f()`` returns ``(loss, grads)`` where ``grads`` maps the keys of
    ``params`` to analytic gradients; ``params`` maps names to the arrays
    ``f`` reads, which are perturbed in place and restored.
    """
    _, analytic = f()
    analytic = {k: np.array(v, dtype=float, copy=True) for k, v in analytic.items()}
    errors = {}
    for name, arr in params.items():
        numeric = numerical_gradient(lambda: f()[0], arr, eps)
        errors[name] = float(relative_error(analytic[name], numeric).max(initial=0.0))
    return errors


def grad_check(f, params, eps=1e-5):
    """Largest relative error between analytic and numerical gradients."""
    return max(gradient_errors(f, params, eps).values(), default=0.0)
