import math

import numpy as np
import pytest

import timepbpm.model as model_mod
from timepbpm.encoding import build_vocabulary, compute_divisors, encode_log, max_prefix_length
from timepbpm.errors import ChecksumError, DivergenceError, ShapeError, VersionError
from timepbpm.model import (
    EarlyStopping,
    ModelConfig,
    build_model,
    default_grid,
    grid_search,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    select_best,
    total_loss,
    train,
)
from timepbpm.nn import grad_check, softmax
from timepbpm.synthetic import cyclic_log, random_log


def tiny(kind="lstm", cs=False, H=4, K=3, n=8, seed=0, **kw):
    cfg = ModelConfig(cell_kind=kind, cost_sensitive=cs, hidden_units=H, seed=seed, **kw)
    return build_model(cfg, K, n, np.linspace(0.5, 2.0, K))


def batch(rng, B=3, T=3, n=8, pad=True):
    X = rng.normal(size=(B, T, n))
    D = rng.uniform(0, 1e5, (B, T))
    M = np.ones((B, T), bool)
    if pad:
        M[0, 0] = False
        X[0, 0] = 0.0
        D[0, 0] = 0.0
    return X, D, M


@pytest.fixture(scope="module")
def small_data():
    log = cyclic_log(24, num_activities=3, max_length=5)
    vocab, div = build_vocabulary(log), compute_divisors(log)
    k = max_prefix_length(log)
    ds = encode_log(log, vocab, div, k)
    return ds, vocab, div, k


def test_shapes_helpdesk_config():
    m = build_model(ModelConfig(hidden_units=100), 9, 14)
    assert m.act_dense.W.shape == (100, 9)
    assert m.time_dense.W.shape == (100, 1)
    probs, t = m.forward(*batch(np.random.default_rng(0), B=2, n=14), "infer")
    assert probs.shape == (2, 9) and t.shape == (2,)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_tlstm_everywhere():
    m = tiny("tlstm")
    names = {p.name for p in m.parameters()}
    assert {"shared.Wd", "act.Wd", "time.Wd"} <= names


def test_class_weights_off_and_on():
    assert np.all(tiny(cs=False).class_weights == 1.0)
    np.testing.assert_allclose(tiny(cs=True).class_weights, [0.5, 1.25, 2.0])
    with pytest.raises(ShapeError):
        build_model(ModelConfig(cost_sensitive=True), 3, 8, [1.0, 2.0])


def test_same_seed_same_init():
    a, b = tiny(seed=5), tiny(seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.value, q.value)
    assert any(np.any(p.value != q.value) for p, q in zip(a.parameters(), tiny(seed=6).parameters()))


def test_duplicate_prefix_identical_predictions():
    m = tiny("tlstm")
    X, D, M = batch(np.random.default_rng(1), B=1, pad=False)
    probs, t = m.forward(np.repeat(X, 2, 0), np.repeat(D, 2, 0), np.repeat(M, 2, 0), "infer")
    np.testing.assert_array_equal(probs[0], probs[1])
    assert t[0] == t[1]


@pytest.mark.parametrize("kind", ["lstm", "tlstm"])
@pytest.mark.parametrize("mode", ["infer", "train"])
def test_pad_invariance(kind, mode):
    m = tiny(kind, dropout_rate=0.0)
    X, D, M = batch(np.random.default_rng(2), B=4)
    p1, t1 = m.forward(X, D, M, mode)
    pad = 3
    Xp = np.concatenate([np.zeros((4, pad, 8)), X], 1)
    Dp = np.concatenate([np.zeros((4, pad)), D], 1)
    Mp = np.concatenate([np.zeros((4, pad), bool), M], 1)
    p2, t2 = m.forward(Xp, Dp, Mp, mode)
    np.testing.assert_allclose(p2, p1, rtol=0, atol=1e-12)
    np.testing.assert_allclose(t2, t1, rtol=0, atol=1e-12)


def test_variant_reduction():
    base = tiny("lstm")
    t = tiny("tlstm")
    for name, p in t.named_parameters().items():
        if name.endswith(("Wd", "bd")):
            p.value[...] = 0.0
        else:
            p.value[...] = base.named_parameters()[name].value
    X, D, M = batch(np.random.default_rng(3))
    for mode in ("infer", "train"):
        a, b = base.forward(X, D, M, mode), t.forward(X, D, M, mode)
        np.testing.assert_allclose(b[0], a[0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(b[1], a[1], rtol=0, atol=1e-12)


def test_total_loss_examples():
    probs = np.array([[0.0, 1.0]])
    assert total_loss(probs, np.array([0.4]), np.array([1]), np.array([0.4])) == 0.0
    p = softmax(np.random.default_rng(0).normal(size=(4, 3)))
    y = np.array([0, 1, 2, 1])
    tp, tt = np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.0, 0.5, 0.3, 1.4])
    expect = -np.mean(np.log(p[np.arange(4), y])) + np.mean(np.abs(tp - tt))
    assert total_loss(p, tp, y, tt) == expect
    assert total_loss(p, tp, y, tt, np.ones(3)) == expect


@pytest.mark.parametrize("kind", ["lstm", "tlstm"])
def test_end_to_end_gradient_tiny_model(kind):
    m = tiny(kind, cs=True, H=4, K=3, dropout_rate=0.0)
    rng = np.random.default_rng(4)
    X, D, M = batch(rng, B=2)
    y_act = np.array([2, 0])
    _, t0 = m.forward(X, D, M, "infer")
    y_time = t0 - 0.5

    def f():
        loss, _, _ = m.loss_and_grads(X, D, M, y_act, y_time, "infer")
        return loss, {p.name: p.grad.copy() for p in m.parameters()}

    assert grad_check(f, {p.name: p.value for p in m.parameters()}) <= 1e-4


def test_early_stopping_rule():
    es = EarlyStopping(25)
    for epoch in range(1, 100):
        es.update(epoch, float(epoch))
        if es.should_stop:
            break
    assert epoch == 26 and es.best_epoch == 1


def test_train_stops_at_26_and_restores_best(small_data, monkeypatch):
    ds, _, _, _ = small_data
    calls = []
    snapshots = {}

    def worsening(model, val):
        calls.append(1)
        snapshots[len(calls)] = model.state_dict()
        return float(len(calls)), 0.0

    monkeypatch.setattr(model_mod, "dataset_losses", worsening)
    m = tiny(n=ds.width, K=3, max_epochs=150, patience=25, batch_size=8)
    m, hist = train(m, ds, ds)
    assert hist.epochs == 26 and hist.best_epoch == 1 and hist.stopped_early
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, snapshots[1][k])


def test_training_is_deterministic(small_data):
    ds, _, _, _ = small_data
    runs = []
    for _ in range(2):
        m = tiny("tlstm", n=ds.width, max_epochs=3, batch_size=8)
        m, hist = train(m, ds, ds)
        runs.append((hist.train_loss, hist.val_total, m.state_dict()))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    for k in runs[0][2]:
        np.testing.assert_array_equal(runs[0][2][k], runs[1][2][k])


def test_best_epoch_minimises_validation(small_data):
    ds, _, _, _ = small_data
    m = tiny(n=ds.width, max_epochs=8, batch_size=8, learning_rate=0.01)
    m, hist = train(m, ds, ds)
    assert hist.val_total[hist.best_epoch - 1] == min(hist.val_total)
    ce, mae = model_mod.dataset_losses(m, ds)
    assert ce + mae == pytest.approx(hist.best_val_loss, rel=1e-12)


def test_divergence_is_reported(small_data, monkeypatch):
    ds, _, _, _ = small_data
    monkeypatch.setattr(model_mod, "dataset_losses", lambda m, v: (math.nan, 0.0))
    with pytest.raises(DivergenceError) as err:
        train(tiny(n=ds.width, max_epochs=5, batch_size=8), ds, ds)
    assert err.value.epoch == 1


def test_default_grid_size():
    grid = default_grid()
    assert len(grid) == 2 * 2 * 5 == 20
    assert {g["hidden_units"] for g in grid} == {64, 100}
    assert {g["dropout_rate"] for g in grid} == {0.0, 0.2}
    assert {g["learning_rate"] for g in grid} == {0.0001, 0.0002, 0.001, 0.002, 0.01}


def _res(loss, units=64, lr=0.001, status="ok"):
    return {"status": status, "val_loss": loss, "config": {"hidden_units": units, "learning_rate": lr}}


def test_select_best():
    assert select_best([_res(0.5), _res(0.4), _res(0.9)]) == 1
    assert select_best([_res(0.4, 100), _res(0.4, 64, 0.01), _res(0.4, 64, 0.001)]) == 2
    assert select_best([_res(math.inf, status="diverged"), _res(2.0)]) == 1
    assert select_best([_res(math.inf, status="diverged")]) is None


def test_grid_single_point_and_resume(small_data):
    ds, _, _, _ = small_data
    base = ModelConfig(hidden_units=4, max_epochs=2, batch_size=8)
    seen = []
    res = grid_search([{"learning_rate": 0.01}], ds, ds, base, 3, on_result=lambda r, m: seen.append(r))
    assert res.best_config.learning_rate == 0.01 and res.best_model is not None
    assert len(seen) == 1
    completed = {model_mod.grid_key(seen[0]["point"]): seen[0]}
    again = grid_search([{"learning_rate": 0.01}], ds, ds, base, 3, completed=completed)
    assert again.results == seen and again.best_model is None


def test_grid_records_divergence(small_data, monkeypatch):
    ds, _, _, _ = small_data
    real = model_mod.train

    def flaky(model, tr, va, cfg=None, epoch_callback=None):
        if model.config.learning_rate == 0.01:
            raise DivergenceError("boom", 3)
        return real(model, tr, va, cfg)

    monkeypatch.setattr(model_mod, "train", flaky)
    base = ModelConfig(hidden_units=4, max_epochs=1, batch_size=8)
    res = grid_search([{"learning_rate": 0.01}, {"learning_rate": 0.001}], ds, ds, base, 3)
    assert [r["status"] for r in res.results] == ["diverged", "ok"]
    assert res.best_config.learning_rate == 0.001


@pytest.mark.parametrize("kind", ["lstm", "tlstm"])
def test_checkpoint_round_trip(tmp_path, small_data, kind):
    ds, vocab, div, k = small_data
    m = tiny(kind, cs=True, n=ds.width, max_epochs=2, batch_size=8)
    m, _ = train(m, ds, ds)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, vocab, div, k)
    m2, meta = load_checkpoint(path)
    assert meta["vocabulary"] == vocab.labels and meta["k_max"] == k
    assert meta["divisors"] == div.to_dict() and meta["config"] == m.config.to_dict()
    for name, p in m.named_parameters().items():
        assert np.array_equal(p.value, m2.named_parameters()[name].value)
    a, b = m.predict_dataset(ds), m2.predict_dataset(ds)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_checkpoint_corruption(tmp_path):
    m = tiny()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    data = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        read_checkpoint(tmp_path / "flip.ckpt")
    with pytest.raises(ShapeError):
        load_checkpoint(path, feature_width=99)


def test_checkpoint_version(tmp_path, monkeypatch):
    path = tmp_path / "m.ckpt"
    monkeypatch.setattr(model_mod, "CHECKPOINT_VERSION", 7)
    save_checkpoint(tiny(), path)
    monkeypatch.setattr(model_mod, "CHECKPOINT_VERSION", 1)
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_config_validation():
    for bad in (dict(dropout_rate=1.0), dict(learning_rate=0.0), dict(cell_kind="gru"), dict(patience=0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_predict_on_random_lengths():
    log = random_log(10, np.random.default_rng(0), min_length=2, max_length=9)
    vocab, div = build_vocabulary(log), compute_divisors(log)
    ds = encode_log(log, vocab, div, 4)
    m = build_model(ModelConfig(hidden_units=3), vocab.size, ds.width)
    probs, t = m.predict_dataset(ds, )
    assert probs.shape == (len(ds), vocab.size) and t.shape == (len(ds),)
    p_small, t_small = m.predict(*ds.arrays(pad_to=4), chunk=3)
    np.testing.assert_allclose(p_small, probs, atol=1e-12)
