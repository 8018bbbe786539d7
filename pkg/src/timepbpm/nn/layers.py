"""Layers with hand-written forward and backward passes.

Arrays are batch-major: a cell sees ``x`` of shape ``(B, n_in)`` and states
of shape ``(B, H)``; sequence layers see ``(B, T, n)`` plus a boolean
``(B, T)`` mask of real (unpadded) steps. Weight matrices multiply from the
right, so ``W`` here is the transpose of the textbook ``W x`` form; the
named per-gate properties return the textbook orientation.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError
from .functional import Parameter, check_finite, decay, glorot_uniform, sigmoid, softmax

GATES = ("f", "i", "g", "o")


class LSTMCellParams:
    """Input weights, recurrent weights and biases of the four gates.

    Stored fused as ``W (n_in, 4H)``, ``U (H, 4H)``, ``b (4H,)`` in gate
    order forget, input, candidate, output.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None,
                 prefix: str = ""):
        self.n_in = n_in
        self.hidden = hidden
        H = hidden
        W = np.zeros((n_in, 4 * H))
        U = np.zeros((H, 4 * H))
        b = np.zeros(4 * H)
        if rng is not None:
            for k in range(4):
                W[:, k * H:(k + 1) * H] = glorot_uniform(rng, n_in, H)
                U[:, k * H:(k + 1) * H] = glorot_uniform(rng, H, H)
            b[:H] = 1.0  # forget-gate bias
        self.W = Parameter(prefix + "W", W)
        self.U = Parameter(prefix + "U", U)
        self.b = Parameter(prefix + "b", b)

    def parameters(self):
        return [self.W, self.U, self.b]

    def _gate(self, arr, gate):
        k = GATES.index(gate)
        return arr[..., k * self.hidden:(k + 1) * self.hidden]

    # textbook-orientation views
    U_f = property(lambda s: s._gate(s.U.value, "f").T)
    U_i = property(lambda s: s._gate(s.U.value, "i").T)
    U_g = property(lambda s: s._gate(s.U.value, "g").T)
    U_o = property(lambda s: s._gate(s.U.value, "o").T)
    W_f = property(lambda s: s._gate(s.W.value, "f").T)
    W_i = property(lambda s: s._gate(s.W.value, "i").T)
    W_g = property(lambda s: s._gate(s.W.value, "g").T)
    W_o = property(lambda s: s._gate(s.W.value, "o").T)
    b_f = property(lambda s: s._gate(s.b.value, "f"))
    b_i = property(lambda s: s._gate(s.b.value, "i"))
    b_g = property(lambda s: s._gate(s.b.value, "g"))
    b_o = property(lambda s: s._gate(s.b.value, "o"))


class TLSTMCellParams:
    """LSTM parameters plus the short-term memory extractor ``W_d``, ``b_d``."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None,
                 prefix: str = ""):
        self.base = LSTMCellParams(n_in, hidden, rng, prefix)
        Wd = glorot_uniform(rng, hidden, hidden) if rng is not None else np.zeros((hidden, hidden))
        self.Wd = Parameter(prefix + "Wd", Wd)
        self.bd = Parameter(prefix + "bd", np.zeros(hidden))

    n_in = property(lambda s: s.base.n_in)
    hidden = property(lambda s: s.base.hidden)
    W_d = property(lambda s: s.Wd.value.T)
    b_d = property(lambda s: s.bd.value)

    def parameters(self):
        return self.base.parameters() + [self.Wd, self.bd]


def lstm_cell_forward(x, h_prev, c_prev, p: LSTMCellParams):
    H = p.hidden
    z = x @ p.W.value + h_prev @ p.U.value + p.b.value
    f = sigmoid(z[:, :H])
    i = sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    check_finite(h, "LSTM hidden state")
    return h, c, (x, h_prev, c_prev, f, i, g, o, tc)


def lstm_cell_backward(dh, dc, cache, p: LSTMCellParams):
    """Return ``(dx, dh_prev, dc_prev, (dW, dU, db))``."""
    x, h_prev, c_prev, f, i, g, o, tc = cache
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dct * c_prev * f * (1.0 - f),
        dct * g * i * (1.0 - i),
        dct * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)
    dx = dz @ p.W.value.T
    dh_prev = dz @ p.U.value.T
    dc_prev = dct * f
    return dx, dh_prev, dc_prev, (x.T @ dz, h_prev.T @ dz, dz.sum(axis=0))


def tlstm_adjust(c_prev, delta_t, Wd, bd):
    """Discount the short-term part of the previous memory by elapsed time.

    ``Wd`` is right-multiplying (``c_prev @ Wd``). ``delta_t`` is a scalar
    or one value per batch row. Returns ``(c_star, cache)``.
    """
    dec = np.asarray(decay(delta_t), dtype=float)
    if dec.ndim == 1:
        dec = dec[:, None]
    c_S = np.tanh(c_prev @ Wd + bd)
    # c_T + c_S_hat = (c_prev - c_S) + c_S * dec, grouped so that dec == 1
    # or c_S == 0 return c_prev bit for bit
    c_star = c_prev + c_S * (dec - 1.0)
    return c_star, (c_prev, c_S, dec)


def tlstm_adjust_backward(dc_star, cache, Wd):
    """Return ``(dc_prev, dWd, dbd)``; both memory branches contribute."""
    c_prev, c_S, dec = cache
    dc_S = dc_star * (dec - 1.0)  # through c_S_hat (+dec) and c_T (-1)
    da = dc_S * (1.0 - c_S * c_S)
    dc_prev = dc_star + da @ Wd.T
    return dc_prev, c_prev.T @ da, da.sum(axis=0)


def tlstm_cell_forward(x, h_prev, c_prev, delta_t, p: TLSTMCellParams):
    c_star, adj = tlstm_adjust(c_prev, delta_t, p.Wd.value, p.bd.value)
    h, c, cell = lstm_cell_forward(x, h_prev, c_star, p.base)
    return h, c, (adj, cell)


def tlstm_cell_backward(dh, dc, cache, p: TLSTMCellParams):
    """Return ``(dx, dh_prev, dc_prev, (dW, dU, db, dWd, dbd))``."""
    adj, cell = cache
    dx, dh_prev, dc_star, (dW, dU, db) = lstm_cell_backward(dh, dc, cell, p.base)
    dc_prev, dWd, dbd = tlstm_adjust_backward(dc_star, adj, p.Wd.value)
    return dx, dh_prev, dc_prev, (dW, dU, db, dWd, dbd)


def _cell_forward(kind, x, h, c, delta, p):
    if kind == "tlstm":
        return tlstm_cell_forward(x, h, c, delta, p)
    return lstm_cell_forward(x, h, c, p)


def _cell_backward(kind, dh, dc, cache, p):
    if kind == "tlstm":
        return tlstm_cell_backward(dh, dc, cache, p)
    return lstm_cell_backward(dh, dc, cache, p)


def recurrent_layer_forward(X, deltas, mask, params, cell_kind="lstm", return_sequences=False):
    """Run a cell over ``(B, T, n)`` inputs starting from zero state.

    Padded steps (``mask`` False) copy the state through unchanged. Returns
    ``(outputs, cache)`` where outputs is ``(B, T, H)`` or the final
    ``(B, H)`` hidden state.
    """
    if cell_kind not in ("lstm", "tlstm"):
        raise ValueError(f"unknown cell kind {cell_kind!r}")
    B, T, n = X.shape
    if n != params.n_in:
        raise ShapeError(f"recurrent layer expects width {params.n_in}, got {n}")
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=1)):
        raise NumericError("input sequence has no real steps")
    H = params.hidden
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.zeros((B, T, H)) if return_sequences else None
    caches = []
    for t in range(T):
        m = mask[:, t]
        if not m.any():
            caches.append(None)
            if return_sequences:
                hs[:, t] = h
            continue
        h_new, c_new, cache = _cell_forward(cell_kind, X[:, t], h, c, deltas[:, t], params)
        mc = m[:, None]
        h = np.where(mc, h_new, h)
        c = np.where(mc, c_new, c)
        caches.append(cache)
        if return_sequences:
            hs[:, t] = h
    out = hs if return_sequences else h
    return out, (caches, mask, cell_kind, return_sequences, X.shape)


def recurrent_layer_backward(dout, cache, params):
    """Backpropagation through time.

    Returns ``(dX, grads)`` with ``grads`` a list matching
    ``params.parameters()``.
    """
    caches, mask, kind, return_sequences, shape = cache
    B, T, _ = shape
    H = params.hidden
    grads = [np.zeros_like(prm.value) for prm in params.parameters()]
    dX = np.zeros(shape)
    dh = np.zeros((B, H)) if return_sequences else np.array(dout, dtype=float)
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        if return_sequences:
            dh = dh + dout[:, t]
        if caches[t] is None:
            continue
        mc = mask[:, t][:, None]
        dx, dh_prev, dc_prev, pgrads = _cell_backward(kind, dh * mc, dc * mc, caches[t], params)
        for acc, g in zip(grads, pgrads):
            acc += g
        dX[:, t] = dx * mc
        dh = np.where(mc, dh_prev, dh)
        dc = np.where(mc, dc_prev, dc)
    return dX, grads


class Recurrent:
    """LSTM or T-LSTM layer over padded, masked sequences."""

    def __init__(self, n_in, hidden, cell_kind="lstm", return_sequences=False, rng=None, name="rnn"):
        self.cell_kind = cell_kind
        self.return_sequences = return_sequences
        cls = TLSTMCellParams if cell_kind == "tlstm" else LSTMCellParams
        self.params = cls(n_in, hidden, rng, prefix=name + ".")
        self._cache = None

    def parameters(self):
        return self.params.parameters()

    def forward(self, X, deltas, mask):
        out, self._cache = recurrent_layer_forward(
            X, deltas, mask, self.params, self.cell_kind, self.return_sequences)
        return out

    def backward(self, dout):
        dX, grads = recurrent_layer_backward(dout, self._cache, self.params)
        for prm, g in zip(self.parameters(), grads):
            prm.grad += g
        return dX


def dense_forward(x, W, b, activation="none"):
    z = x @ W + b
    if activation == "softmax":
        y = softmax(z)
    elif activation == "none":
        y = z
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return check_finite(y, "dense output")


class Dense:
    def __init__(self, n_in, n_out, activation="none", rng=None, name="dense"):
        self.activation = activation
        W = glorot_uniform(rng, n_in, n_out) if rng is not None else np.zeros((n_in, n_out))
        self.W = Parameter(name + ".W", W)
        self.b = Parameter(name + ".b", np.zeros(n_out))
        self._x = None
        self._y = None

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x):
        if x.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"dense layer expects width {self.W.shape[0]}, got {x.shape[-1]}")
        self._x = x
        self._y = dense_forward(x, self.W.value, self.b.value, self.activation)
        return self._y

    def logits(self, x):
        """Pre-activation output; caches like :meth:`forward`."""
        self._x = x
        z = x @ self.W.value + self.b.value
        self._y = z
        return check_finite(z, "dense output")

    def backward(self, dy, wrt_logits=False):
        """Backward from ``dy`` (w.r.t. the output, or the logits if flagged)."""
        if self.activation == "softmax" and not wrt_logits:
            p = self._y
            dz = p * (dy - (dy * p).sum(axis=-1, keepdims=True))
        else:
            dz = dy
        self.W.grad += self._x.T @ dz
        self.b.grad += dz.sum(axis=0)
        return dz @ self.W.value.T


class BatchNorm:
    """Per-feature batch normalisation over the last axis.

    For ``(B, T, H)`` input the statistics pool batch and time; with a mask
    only real steps contribute and padded outputs are zero.
    """

    def __init__(self, width, momentum=0.99, epsilon=1e-3, name="bn"):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Parameter(name + ".gamma", np.ones(width))
        self.beta = Parameter(name + ".beta", np.zeros(width))
        self.moving_mean = np.zeros(width)
        self.moving_var = np.ones(width)
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, X, mode="train", mask=None):
        if mask is None:
            mask = np.ones(X.shape[:-1], dtype=bool)
        rows = X[mask]
        if mode == "train":
            if rows.shape[0] < 2:
                raise ValueError("batch normalisation in train mode needs at least 2 samples")
            mean = rows.mean(axis=0)
            var = rows.var(axis=0)
            self.moving_mean = self.momentum * self.moving_mean + (1 - self.momentum) * mean
            self.moving_var = self.momentum * self.moving_var + (1 - self.momentum) * var
        elif mode == "infer":
            mean, var = self.moving_mean, self.moving_var
        else:
            raise ValueError(f"unknown mode {mode!r}")
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (rows - mean) * inv_std
        Y = np.zeros_like(X)
        Y[mask] = self.gamma.value * xhat + self.beta.value
        self._cache = (mask, xhat, inv_std, mode)
        return Y

    def backward(self, dY):
        mask, xhat, inv_std, mode = self._cache
        dy = dY[mask]
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        if mode == "train":
            N = dy.shape[0]
            dx = inv_std / N * (N * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        dX = np.zeros(dY.shape)
        dX[mask] = dx
        return dX


def batchnorm_forward(X, bn: BatchNorm, mode="train", mask=None):
    return bn.forward(X, mode, mask)


class Dropout:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""

    def __init__(self, rate=0.0):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self._scale = None

    def forward(self, x, mode="train", rng=None):
        if mode != "train" or self.rate == 0.0:
            self._scale = None
            return x
        keep = rng.random(x.shape) >= self.rate
        self._scale = keep / (1.0 - self.rate)
        return x * self._scale

    def backward(self, dy):
        return dy if self._scale is None else dy * self._scale


def dropout_forward(x, rate, mode, rng):
    return Dropout(rate).forward(x, mode, rng)
