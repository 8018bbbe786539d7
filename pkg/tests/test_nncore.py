import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timepbpm.errors import NumericError, ShapeError
from timepbpm.nn import (
    BatchNorm,
    Dense,
    Dropout,
    LSTMCellParams,
    Nadam,
    Parameter,
    TLSTMCellParams,
    decay,
    dense_forward,
    grad_check,
    lstm_cell_backward,
    lstm_cell_forward,
    mae_loss,
    nadam_update,
    recurrent_layer_backward,
    recurrent_layer_forward,
    softmax,
    tlstm_adjust,
    tlstm_cell_backward,
    tlstm_cell_forward,
    weighted_cross_entropy,
)

E2_MINUS_E = math.e ** 2 - math.e


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def oracle_lstm_step(x, h, c, p):
    """Straight-line per-unit evaluation with textbook (H, n) matrices."""
    H = len(h)
    h_new, c_new = [], []
    for u in range(H):
        def pre(Wg, Ug, bg):
            return sum(Wg[u][j] * x[j] for j in range(len(x))) + sum(Ug[u][j] * h[j] for j in range(H)) + bg[u]
        f = _sig(pre(p.W_f, p.U_f, p.b_f))
        i = _sig(pre(p.W_i, p.U_i, p.b_i))
        o = _sig(pre(p.W_o, p.U_o, p.b_o))
        g = math.tanh(pre(p.W_g, p.U_g, p.b_g))
        cu = f * c[u] + i * g
        c_new.append(cu)
        h_new.append(o * math.tanh(cu))
    return np.array(h_new), np.array(c_new)


def random_cell(kind, n, H, rng, scale=0.7):
    p = (TLSTMCellParams if kind == "tlstm" else LSTMCellParams)(n, H)
    for prm in p.parameters():
        prm.value[...] = rng.normal(0.0, scale, prm.shape)
    return p


def test_lstm_zero_params():
    p = LSTMCellParams(1, 1)
    h, c, _ = lstm_cell_forward(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), p)
    assert h[0, 0] == 0.0 and c[0, 0] == 0.0
    h, c, _ = lstm_cell_forward(np.zeros((1, 1)), np.zeros((1, 1)), np.full((1, 1), 2.0), p)
    assert c[0, 0] == 1.0
    assert h[0, 0] == pytest.approx(0.5 * math.tanh(1.0), abs=1e-15)
    assert h[0, 0] == pytest.approx(0.38079, abs=1e-5)


def test_lstm_matches_straight_line_oracle(rng):
    p = random_cell("lstm", 3, 3, rng)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    h, c, _ = lstm_cell_forward(x[None], h0[None], c0[None], p)
    ho, co = oracle_lstm_step(x, h0, c0, p)
    np.testing.assert_allclose(h[0], ho, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c[0], co, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-30, 30))
def test_gates_stay_in_range(seed, scale):
    rng = np.random.default_rng(seed)
    p = random_cell("lstm", 3, 4, rng, abs(scale) + 0.1)
    _, _, cache = lstm_cell_forward(rng.normal(size=(2, 3)) * scale, rng.normal(size=(2, 4)),
                                    rng.normal(size=(2, 4)), p)
    _, _, _, f, i, g, o, _ = cache
    for gate in (f, i, o):
        assert np.all((gate >= 0) & (gate <= 1))
    assert np.all(np.abs(g) <= 1)


def test_decay_examples():
    assert decay(0.0) == 1.0
    assert decay(E2_MINUS_E) == pytest.approx(0.5, abs=1e-12)
    mp.mp.dps = 40
    ref = 1 / mp.log(mp.e + 86400)
    assert decay(86400) == pytest.approx(float(ref), rel=1e-14)
    assert decay(86400) == pytest.approx(0.08797, abs=1e-5)
    with pytest.raises(ValueError):
        decay(-1.0)
    with pytest.raises(ValueError):
        decay(np.array([1.0, float("nan")]))


def test_decay_monotone_bounded():
    grid = np.concatenate([[0.0], np.logspace(-6, 9, 999)])
    d = decay(grid)
    assert np.all(np.diff(d) < 0)
    assert np.all((d > 0) & (d <= 1))


def test_tlstm_adjust_examples():
    c = np.array([[1.5, -0.3]])
    Wd = np.array([[0.4, -1.0], [2.0, 0.1]])
    bd = np.array([0.2, -0.5])
    np.testing.assert_array_equal(tlstm_adjust(c, 0.0, Wd, bd)[0], c)
    np.testing.assert_array_equal(tlstm_adjust(c, 1e7, np.zeros((2, 2)), np.zeros(2))[0], c)
    cs, cache = tlstm_adjust(np.ones((1, 1)), E2_MINUS_E, np.ones((1, 1)), np.zeros(1))
    mp.mp.dps = 40
    expect = 1 - mp.tanh(1) + mp.tanh(1) / mp.log(mp.e ** 2)
    assert cs[0, 0] == pytest.approx(float(expect), abs=1e-12)
    assert cache[2].ravel()[0] == pytest.approx(0.5, abs=1e-12)


def test_tlstm_reduces_to_lstm_per_step(rng):
    p = random_cell("tlstm", 3, 4, rng)
    x, h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    ref_h, ref_c, _ = lstm_cell_forward(x, h0, c0, p.base)
    h, c, _ = tlstm_cell_forward(x, h0, c0, np.zeros(2), p)
    np.testing.assert_array_equal(h, ref_h)
    np.testing.assert_array_equal(c, ref_c)
    far_h, _, _ = tlstm_cell_forward(x, h0, c0, np.full(2, 1e6), p)
    assert np.all(np.abs(far_h - ref_h) > 0)


def test_recurrent_single_step_and_unroll(rng):
    p = random_cell("lstm", 1, 1, rng)
    X = rng.normal(size=(1, 3, 1))
    D = np.zeros((1, 3))
    out, _ = recurrent_layer_forward(X, D, np.array([[False, False, True]]), p, "lstm")
    h1, _, _ = lstm_cell_forward(X[:, 2], np.zeros((1, 1)), np.zeros((1, 1)), p)
    np.testing.assert_array_equal(out, h1)
    out, _ = recurrent_layer_forward(X, D, np.ones((1, 3), bool), p, "lstm")
    h, c = np.zeros(1), np.zeros(1)
    for t in range(3):
        h, c = oracle_lstm_step(X[0, t], h, c, p)
    np.testing.assert_allclose(out[0], h, atol=1e-12)


@pytest.mark.parametrize("kind", ["lstm", "tlstm"])
def test_recurrent_pad_copy_through(kind, rng):
    p = random_cell(kind, 2, 3, rng)
    X = rng.normal(size=(2, 3, 2))
    D = rng.uniform(0, 1e5, (2, 3))
    M = np.ones((2, 3), bool)
    short, _ = recurrent_layer_forward(X, D, M, p, kind)
    Xp = np.concatenate([np.zeros((2, 4, 2)), X], axis=1)
    Dp = np.concatenate([np.zeros((2, 4)), D], axis=1)
    Mp = np.concatenate([np.zeros((2, 4), bool), M], axis=1)
    padded, _ = recurrent_layer_forward(Xp, Dp, Mp, p, kind)
    np.testing.assert_allclose(padded, short, rtol=0, atol=1e-12)
    seq, _ = recurrent_layer_forward(Xp, Dp, Mp, p, kind, return_sequences=True)
    assert seq.shape == (2, 7, 3)


def test_recurrent_all_padded_row_errors(rng):
    p = random_cell("lstm", 2, 2, rng)
    with pytest.raises(NumericError):
        recurrent_layer_forward(np.zeros((1, 2, 2)), np.zeros((1, 2)), np.zeros((1, 2), bool), p)


def test_recurrent_width_mismatch(rng):
    p = random_cell("lstm", 2, 2, rng)
    with pytest.raises(ShapeError):
        recurrent_layer_forward(np.zeros((1, 2, 3)), np.zeros((1, 2)), np.ones((1, 2), bool), p)


def test_tlstm_zero_wd_gradients_match_lstm(rng):
    lp = random_cell("lstm", 3, 4, rng)
    tp = TLSTMCellParams(3, 4)
    for a, b in zip(lp.parameters(), tp.base.parameters()):
        b.value[...] = a.value
    X = rng.normal(size=(2, 3, 3))
    D = rng.uniform(0, 1e5, (2, 3))
    M = np.ones((2, 3), bool)
    R = rng.normal(size=(2, 4))
    _, lc = recurrent_layer_forward(X, D, M, lp, "lstm")
    _, tc = recurrent_layer_forward(X, D, M, tp, "tlstm")
    dXl, gl = recurrent_layer_backward(R, lc, lp)
    dXt, gt = recurrent_layer_backward(R, tc, tp)
    np.testing.assert_allclose(dXt, dXl, atol=1e-12)
    for a, b in zip(gl, gt[:3]):
        np.testing.assert_allclose(b, a, atol=1e-12)
    assert np.abs(gt[4]).max() > 0


def test_zero_upstream_gives_zero_grads(rng):
    p = random_cell("tlstm", 2, 3, rng)
    x, h0, c0 = rng.normal(size=(2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    _, _, cache = tlstm_cell_forward(x, h0, c0, np.ones(2), p)
    out = tlstm_cell_backward(np.zeros((2, 3)), np.zeros((2, 3)), cache, p)
    for g in out[:3] + tuple(out[3]):
        assert not np.any(g)
    _, _, cache = lstm_cell_forward(x, h0, c0, p.base)
    for g in lstm_cell_backward(np.zeros((2, 3)), np.zeros((2, 3)), cache, p.base)[3]:
        assert not np.any(g)


def test_dense_examples():
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)
    np.testing.assert_allclose(dense_forward(x * 0, np.eye(3), np.zeros(3), "softmax"), [[1 / 3] * 3])
    mp.mp.dps = 30
    z = [mp.mpf(1), mp.mpf(2), mp.mpf(3)]
    ref = [float(mp.e ** v / sum(mp.e ** u for u in z)) for v in z]
    got = softmax(np.array([[1.0, 2.0, 3.0]]))[0]
    np.testing.assert_allclose(got, ref, rtol=1e-14)
    np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=5e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_dense_non_finite():
    with pytest.raises(NumericError):
        Dense(1, 1).forward(np.array([[np.inf]]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(z):
    p = softmax(np.array([z]))
    assert abs(p.sum() - 1) <= 1e-9 and np.all(p >= 0)


def test_batchnorm_examples():
    bn = BatchNorm(2)
    assert not bn.forward(np.full((4, 2), 3.0), "train").any()
    X = np.random.default_rng(0).normal(3.0, 2.0, (50, 2))
    Y = BatchNorm(2).forward(X, "train")
    np.testing.assert_allclose(Y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(Y.var(axis=0), 1, atol=1e-3)
    bn = BatchNorm(1)
    bn.gamma.value[:] = 2.0
    bn.beta.value[:] = 1.0
    Y = bn.forward(np.array([[0.0], [2.0]]), "train")
    s = 1 / math.sqrt(1 + bn.epsilon)
    np.testing.assert_allclose(Y.ravel(), [1 - 2 * s, 1 + 2 * s], rtol=1e-14)
    np.testing.assert_allclose(Y.ravel(), [-1, 3], atol=2e-3)
    np.testing.assert_allclose(bn.moving_mean, [0.01])
    np.testing.assert_allclose(bn.moving_var, [0.99 + 0.01])


def test_batchnorm_single_sample_train_errors():
    with pytest.raises(ValueError):
        BatchNorm(2).forward(np.ones((1, 2)), "train")


def test_batchnorm_masked_pools_real_steps_only():
    X = np.array([[[9.0], [0.0]], [[9.0], [2.0]]])
    M = np.array([[False, True], [False, True]])
    Y = BatchNorm(1).forward(X, "train", M)
    s = 1 / math.sqrt(1 + 1e-3)
    np.testing.assert_allclose(Y[:, 1, 0], [-s, s])
    assert not Y[:, 0].any()


def test_dropout():
    x = np.ones(100_000)
    for mode in ("train", "infer"):
        assert Dropout(0.0).forward(x, mode) is x
    assert Dropout(0.5).forward(x, "infer") is x
    y = Dropout(0.2).forward(x, "train", np.random.default_rng(3))
    assert abs(np.mean(y > 0) - 0.8) <= 0.01
    assert set(np.unique(y)) == {0.0, 1.25}
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_cross_entropy_examples():
    loss, _ = weighted_cross_entropy(np.array([[0.0, 1.0]]), np.array([[0, 1]]))
    assert loss == 0.0
    loss, _ = weighted_cross_entropy(np.array([[0.5, 0.5]]), np.array([[0, 1]]), np.array([1.0, 2.0]))
    assert loss == pytest.approx(2 * math.log(2), abs=1e-15)
    assert loss == pytest.approx(1.38629, abs=5e-6)
    p = softmax(np.random.default_rng(2).normal(size=(4, 3)))
    y = np.array([0, 2, 1, 2])
    plain = -np.mean(np.log(p[np.arange(4), y]))
    assert weighted_cross_entropy(p, y, np.ones(3))[0] == pytest.approx(plain, rel=1e-14)
    assert np.isfinite(weighted_cross_entropy(np.array([[1.0, 0.0]]), [1])[0])
    with pytest.raises(ShapeError):
        weighted_cross_entropy(p, np.zeros((4, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_cross_entropy_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = softmax(rng.normal(0, 5, (3, 4)))
    assert weighted_cross_entropy(p, rng.integers(0, 4, 3), rng.uniform(0, 3, 4))[0] >= 0


def test_mae_examples():
    assert mae_loss([1.0, 2.0], [1.0, 2.0])[0] == 0.0
    loss, g = mae_loss(np.array([0.0, 2.0]), np.array([1.0, 1.0]))
    assert loss == 1.0
    np.testing.assert_array_equal(g, [-0.5, 0.5])
    assert mae_loss([1.0], [1.0])[1][0] == 0.0
    with pytest.raises(ValueError):
        mae_loss([], [])


def reference_nadam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-7):
    """Scalar reference written from the update rule, one float at a time."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (t + 1))
        vhat = v / (1 - b2 ** t)
        theta -= lr * (b1 * mhat + (1 - b1) * g / (1 - b1 ** t)) / (math.sqrt(vhat) + eps)
    return theta


def test_nadam_zero_gradient():
    p = Parameter("w", np.array([1.0, -2.0]))
    Nadam(0.1).step([p])
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_nadam_matches_reference():
    p = Parameter("w", np.array([0.3]))
    p.grad[:] = 1.0
    Nadam(0.01).step([p])
    assert p.value[0] == pytest.approx(reference_nadam(0.3, [1.0], 0.01), abs=1e-12)
    grads = np.random.default_rng(8).normal(size=25)
    opt, q = Nadam(0.005), Parameter("q", np.array([1.0]))
    for g in grads:
        q.grad[:] = g
        opt.step([q])
    assert q.value[0] == pytest.approx(reference_nadam(1.0, grads, 0.005), abs=1e-12)


@pytest.mark.parametrize("g", [0.37, -4.0])
def test_nadam_step_size_limit(g):
    value, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    for t in range(1, 10_001):
        new, m, v = nadam_update(value, np.array([g]), m, v, t, 0.01)
        step = (new - value)[0]
        value = new
    assert step == pytest.approx(-0.01 * math.copysign(1, g), rel=0.05)


def test_nadam_errors():
    p = Parameter("layer.W", np.zeros(2))
    p.grad[0] = np.nan
    with pytest.raises(NumericError, match="layer.W"):
        Nadam().step([p])
    with pytest.raises(ValueError):
        nadam_update(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0, 0.1)


def test_grad_check_quadratic_and_linear():
    theta = np.array([3.0])
    err = grad_check(lambda: (float(theta[0] ** 2), {"t": np.array([2 * theta[0]])}), {"t": theta})
    assert err <= 1e-9
    w = np.array([1.5, -2.0, 0.25])
    a = np.array([0.7, 3.0, -1.1])
    assert grad_check(lambda: (float(a @ w), {"w": a}), {"w": w}) <= 1e-10
    np.testing.assert_array_equal(w, [1.5, -2.0, 0.25])


def test_grad_check_detects_wrong_gradient():
    theta = np.array([3.0])
    assert grad_check(lambda: (float(theta[0] ** 2), {"t": np.array([5.0])}), {"t": theta}) > 0.1
