"""Class-weighted cross-entropy and mean absolute error."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

PROB_FLOOR = 1e-12


def weighted_cross_entropy(probs, targets, weights=None):
    """Mean of ``w_y * -ln p_y`` over the batch.

    ``targets`` is one-hot ``(B, K)`` or a vector of class indices. Returns
    ``(loss, dlogits)`` where the gradient is taken w.r.t. the logits that
    produced ``probs`` through a softmax.
    """
    probs = np.asarray(probs, dtype=float)
    B, K = probs.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != B:
            raise ShapeError("targets and probabilities disagree on batch size")
        idx = targets.astype(np.int64)
    else:
        if targets.shape != probs.shape:
            raise ShapeError(f"targets {targets.shape} vs probabilities {probs.shape}")
        idx = targets.argmax(axis=1)
    w = np.ones(K) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (K,):
        raise ShapeError(f"expected {K} class weights, got {w.shape}")
    rows = np.arange(B)
    p_y = np.clip(probs[rows, idx], PROB_FLOOR, 1.0)
    wy = w[idx]
    loss = float(np.mean(wy * -np.log(p_y)))
    dlogits = probs.copy()
    dlogits[rows, idx] -= 1.0
    dlogits *= (wy / B)[:, None]
    return loss, dlogits


def mae_loss(pred, target):
    """Mean absolute error and its subgradient (0 where pred == target)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / pred.size
