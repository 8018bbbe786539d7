"""Multitask next-activity / next-time model, training loop, grid search, checkpoints.

Topology::

    prefix -> recurrent (sequences) -> BN -+-> recurrent -> BN -> dropout -> dense -> softmax
                                           +-> recurrent -> BN -> dropout -> dense (time)

Every recurrent layer is an LSTM or, for the time-aware variants, a T-LSTM.
"""

from __future__ import annotations

import copy
import hashlib
import io
import itertools
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import __version__
from .encoding import EncodedDataset, batch_prefixes
from .errors import (
    CheckpointError,
    ChecksumError,
    DivergenceError,
    NumericError,
    ShapeError,
    VersionError,
)
from .nn import BatchNorm, Dense, Dropout, Nadam, Recurrent, mae_loss, softmax, weighted_cross_entropy

log = logging.getLogger(__name__)

CELL_KINDS = ("lstm", "tlstm")
DIVERGENCE_LIMIT = 1e6
EVAL_CHUNK = 512

DEFAULT_UNITS = (64, 100)
DEFAULT_DROPOUTS = (0.0, 0.2)
DEFAULT_LEARNING_RATES = (0.0001, 0.0002, 0.001, 0.002, 0.01)


@dataclass(frozen=True)
class ModelConfig:
    cell_kind: str = "lstm"
    cost_sensitive: bool = False
    hidden_units: int = 100
    dropout_rate: float = 0.2
    learning_rate: float = 0.002
    max_epochs: int = 150
    batch_size: int = 64
    patience: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(f"cell_kind must be one of {CELL_KINDS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.hidden_units < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("hidden_units, batch_size, max_epochs and patience must be positive")

    @property
    def variant(self) -> str:
        return variant_name(self.cell_kind, self.cost_sensitive)

    def to_dict(self) -> dict:
        return asdict(self)


def variant_name(cell_kind: str, cost_sensitive: bool) -> str:
    name = "Tax"
    if cost_sensitive:
        name += "+CS"
    if cell_kind == "tlstm":
        name += "+T-LSTM"
    return name


class MultitaskModel:
    def __init__(self, config: ModelConfig, num_classes: int, feature_width: int,
                 class_weights=None):
        if num_classes < 1 or feature_width < 1:
            raise ValueError("num_classes and feature_width must be positive")
        self.config = config
        self.num_classes = num_classes
        self.feature_width = feature_width
        H, kind = config.hidden_units, config.cell_kind
        rng = np.random.default_rng(config.seed)
        self.shared = Recurrent(feature_width, H, kind, True, rng, "shared")
        self.shared_bn = BatchNorm(H, name="shared_bn")
        self.act_rnn = Recurrent(H, H, kind, False, rng, "act")
        self.act_bn = BatchNorm(H, name="act_bn")
        self.act_drop = Dropout(config.dropout_rate)
        self.act_dense = Dense(H, num_classes, "softmax", rng, "act_dense")
        self.time_rnn = Recurrent(H, H, kind, False, rng, "time")
        self.time_bn = BatchNorm(H, name="time_bn")
        self.time_drop = Dropout(config.dropout_rate)
        self.time_dense = Dense(H, 1, "none", rng, "time_dense")
        if config.cost_sensitive and class_weights is not None:
            cw = np.asarray(class_weights, dtype=float)
            if cw.shape != (num_classes,):
                raise ShapeError(f"expected {num_classes} class weights, got {cw.shape}")
        else:
            cw = np.ones(num_classes)
        self.class_weights = cw
        self.dropout_rng = np.random.default_rng([config.seed, 1])
        self._mask = None

    def _layers(self):
        return [self.shared, self.shared_bn, self.act_rnn, self.act_bn, self.act_dense,
                self.time_rnn, self.time_bn, self.time_dense]

    def _batchnorms(self):
        return [self.shared_bn, self.act_bn, self.time_bn]

    def parameters(self):
        return [p for layer in self._layers() for p in layer.parameters()]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, X, deltas, mask, mode="infer"):
        """Return ``(activity probabilities (B, K), time predictions (B,))``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[2] != self.feature_width:
            raise ShapeError(f"expected input (B, T, {self.feature_width}), got {X.shape}")
        mask = np.asarray(mask, dtype=bool)
        deltas = np.asarray(deltas, dtype=float)
        self._mask = mask
        rng = self.dropout_rng
        seq = self.shared.forward(X, deltas, mask)
        seq = self.shared_bn.forward(seq, mode, mask)

        a = self.act_rnn.forward(seq, deltas, mask)
        a = self.act_bn.forward(a, mode)
        a = self.act_drop.forward(a, mode, rng)
        probs = softmax(self.act_dense.logits(a))

        t = self.time_rnn.forward(seq, deltas, mask)
        t = self.time_bn.forward(t, mode)
        t = self.time_drop.forward(t, mode, rng)
        tpred = self.time_dense.forward(t)[:, 0]
        if not (np.all(np.isfinite(probs)) and np.all(np.isfinite(tpred))):
            raise NumericError("non-finite model output")
        return probs, tpred

    def backward(self, dlogits, dtime):
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        da = self.act_dense.backward(dlogits, wrt_logits=True)
        da = self.act_drop.backward(da)
        da = self.act_bn.backward(da)
        dseq = self.act_rnn.backward(da)

        dt = self.time_dense.backward(np.asarray(dtime, dtype=float)[:, None])
        dt = self.time_drop.backward(dt)
        dt = self.time_bn.backward(dt)
        dseq = dseq + self.time_rnn.backward(dt)

        dseq = self.shared_bn.backward(dseq)
        return self.shared.backward(dseq)

    def loss_and_grads(self, X, deltas, mask, y_act, y_time, mode="train"):
        """Zero grads, run forward and backward; returns ``(total, ce, mae)``."""
        self.zero_grad()
        probs, tpred = self.forward(X, deltas, mask, mode)
        ce, dlogits = weighted_cross_entropy(probs, y_act, self.class_weights)
        mae, dtime = mae_loss(tpred, y_time)
        self.backward(dlogits, dtime)
        return ce + mae, ce, mae

    def predict(self, X, deltas, mask, chunk=EVAL_CHUNK):
        """Inference-mode forward in chunks."""
        probs, times = [], []
        for s in range(0, X.shape[0], chunk):
            p, t = self.forward(X[s:s + chunk], deltas[s:s + chunk], mask[s:s + chunk], "infer")
            probs.append(p)
            times.append(t)
        return np.concatenate(probs), np.concatenate(times)

    def predict_dataset(self, ds: EncodedDataset, chunk=EVAL_CHUNK):
        probs, times = [], []
        for s in range(0, len(ds), chunk):
            idx = np.arange(s, min(s + chunk, len(ds)))
            X, D, M = ds.arrays(idx)
            p, t = self.forward(X, D, M, "infer")
            probs.append(p)
            times.append(t)
        return np.concatenate(probs), np.concatenate(times)

    def state_dict(self) -> dict:
        state = {p.name: p.value.copy() for p in self.parameters()}
        for bn in self._batchnorms():
            name = bn.gamma.name.rsplit(".", 1)[0]
            state[name + ".moving_mean"] = bn.moving_mean.copy()
            state[name + ".moving_var"] = bn.moving_var.copy()
        return state

    def load_state_dict(self, state: dict, strict=True):
        params = self.named_parameters()
        for bn in self._batchnorms():
            name = bn.gamma.name.rsplit(".", 1)[0]
            for attr in ("moving_mean", "moving_var"):
                key = f"{name}.{attr}"
                if key in state:
                    arr = np.asarray(state[key], dtype=float)
                    if arr.shape != getattr(bn, attr).shape:
                        raise ShapeError(f"{key}: expected {getattr(bn, attr).shape}, got {arr.shape}")
                    setattr(bn, attr, arr.copy())
                elif strict:
                    raise ShapeError(f"missing state entry {key}")
        for name, p in params.items():
            if name not in state:
                if strict:
                    raise ShapeError(f"missing parameter {name}")
                continue
            arr = np.asarray(state[name], dtype=float)
            if arr.shape != p.value.shape:
                raise ShapeError(f"{name}: expected shape {p.value.shape}, got {arr.shape}")
            p.value[...] = arr


def build_model(config: ModelConfig, num_classes: int, feature_width: int,
                class_weights=None) -> MultitaskModel:
    return MultitaskModel(config, num_classes, feature_width, class_weights)


def total_loss(probs, time_pred, y_act, y_time, class_weights=None) -> float:
    """Weighted cross-entropy plus MAE in normalised time units, summed 1:1."""
    ce, _ = weighted_cross_entropy(probs, y_act, class_weights)
    mae, _ = mae_loss(time_pred, y_time)
    return ce + mae


def dataset_losses(model: MultitaskModel, ds: EncodedDataset) -> tuple[float, float]:
    """Inference-mode ``(cross-entropy, MAE)`` averaged over every prefix."""
    probs, tpred = model.predict_dataset(ds)
    y_act, y_time = ds.labels()
    ce, _ = weighted_cross_entropy(probs, y_act, model.class_weights)
    mae, _ = mae_loss(tpred, y_time)
    return ce, mae


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_ce: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.val_total)

    @property
    def best_val_loss(self) -> float:
        return self.val_total[self.best_epoch - 1] if self.best_epoch else math.inf

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; returns True if it is a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.stale = loss, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _training_batches(n, batch_size, seed):
    batches = [np.asarray(b) for b in batch_prefixes(range(n), batch_size, seed)]
    # batch normalisation cannot train on a single sample
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def train(model: MultitaskModel, train_set: EncodedDataset, val_set: EncodedDataset,
          config: ModelConfig | None = None,
          epoch_callback: Callable[[int, TrainHistory], None] | None = None,
          ) -> tuple[MultitaskModel, TrainHistory]:
    """Train with Nadam and early stopping; restores the best-validation parameters."""
    config = config or model.config
    if len(train_set) < 2 or len(val_set) == 0:
        raise ValueError("need at least 2 training prefixes and 1 validation prefix")
    opt = Nadam(config.learning_rate)
    params = model.parameters()
    stopper = EarlyStopping(config.patience)
    hist = TrainHistory()
    best_state = model.state_dict()
    shuffle_rng = np.random.default_rng([config.seed, 2])

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        seen, running = 0, 0.0
        for idx in _training_batches(len(train_set), config.batch_size,
                                     int(shuffle_rng.integers(2**31))):
            X, D, M = train_set.arrays(idx)
            y_act, y_time = train_set.labels(idx)
            try:
                loss, _, _ = model.loss_and_grads(X, D, M, y_act, y_time, "train")
                if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                    raise NumericError(f"training loss {loss}")
                opt.step(params)
            except NumericError as exc:
                raise DivergenceError(f"diverged in epoch {epoch}: {exc}", epoch) from exc
            running += loss * len(idx)
            seen += len(idx)
        try:
            ce, mae = dataset_losses(model, val_set)
        except NumericError as exc:
            raise DivergenceError(f"diverged in epoch {epoch}: {exc}", epoch) from exc
        total = ce + mae
        if not math.isfinite(total) or total > DIVERGENCE_LIMIT:
            raise DivergenceError(f"diverged in epoch {epoch}: validation loss {total}", epoch)
        hist.train_loss.append(running / seen)
        hist.val_ce.append(ce)
        hist.val_mae.append(mae)
        hist.val_total.append(total)
        hist.seconds.append(time.perf_counter() - t0)
        if stopper.update(epoch, total):
            best_state = model.state_dict()
        hist.best_epoch = stopper.best_epoch
        log.info("epoch %d train %.5f val_ce %.5f val_mae %.5f val_total %.5f %.2fs",
                 epoch, hist.train_loss[-1], ce, mae, total, hist.seconds[-1])
        if epoch_callback is not None:
            epoch_callback(epoch, hist)
        if stopper.should_stop:
            hist.stopped_early = epoch < config.max_epochs
            break
    model.load_state_dict(best_state)
    return model, hist


def format_epoch_line(epoch: int, hist: TrainHistory) -> str:
    i = epoch - 1
    return (f"{epoch}\t{hist.train_loss[i]:.6f}\t{hist.val_ce[i]:.6f}\t"
            f"{hist.val_mae[i]:.6f}\t{hist.val_total[i]:.6f}\t{hist.seconds[i]:.3f}")


EPOCH_LOG_HEADER = "epoch\ttrain_loss\tval_ce\tval_mae\tval_total\tseconds"


def default_grid(units: Iterable[int] = DEFAULT_UNITS, dropouts: Iterable[float] = DEFAULT_DROPOUTS,
                 learning_rates: Iterable[float] = DEFAULT_LEARNING_RATES) -> list[dict]:
    return [{"hidden_units": u, "dropout_rate": d, "learning_rate": lr}
            for u, d, lr in itertools.product(units, dropouts, learning_rates)]


@dataclass
class GridResult:
    best_config: ModelConfig | None
    results: list[dict]
    best_model: MultitaskModel | None = None
    best_history: TrainHistory | None = None


def select_best(results: list[dict]) -> int | None:
    """Index of the lowest validation loss; ties go to fewer units, then smaller lr."""
    ok = [i for i, r in enumerate(results)
          if r.get("status") == "ok" and math.isfinite(r["val_loss"])]
    if not ok:
        return None
    return min(ok, key=lambda i: (results[i]["val_loss"],
                                  results[i]["config"]["hidden_units"],
                                  results[i]["config"]["learning_rate"]))


def grid_key(point: dict) -> str:
    return json.dumps(point, sort_keys=True)


def grid_search(space: list[dict], train_set: EncodedDataset, val_set: EncodedDataset,
                base_config: ModelConfig, num_classes: int, class_weights=None,
                completed: dict | None = None,
                on_result: Callable[[dict, MultitaskModel | None], None] | None = None,
                ) -> GridResult:
    """Train every grid point and select the lowest validation total loss.

    ``completed`` maps :func:`grid_key` strings to earlier results, which are
    reused without retraining. Diverging points are recorded and skipped.
    """
    if not space:
        raise ValueError("empty grid")
    completed = completed or {}
    results = []
    best_model, best_hist = None, None
    for point in space:
        key = grid_key(point)
        if key in completed:
            results.append(completed[key])
            continue
        cfg = replace(base_config, **point)
        model = build_model(cfg, num_classes, train_set.width, class_weights)
        try:
            model, hist = train(model, train_set, val_set, cfg)
            res = {"point": point, "config": cfg.to_dict(), "status": "ok",
                   "val_loss": hist.best_val_loss, "best_epoch": hist.best_epoch,
                   "epochs": hist.epochs}
        except DivergenceError as exc:
            log.warning("grid point %s diverged: %s", point, exc)
            model, hist = None, None
            res = {"point": point, "config": cfg.to_dict(), "status": "diverged",
                   "val_loss": math.inf, "error": str(exc), "epoch": exc.epoch}
        results.append(res)
        if on_result is not None:
            on_result(res, model)
        if model is not None and select_best(results) == len(results) - 1:
            best_model, best_hist = model, hist
    i = select_best(results)
    best_cfg = ModelConfig(**results[i]["config"]) if i is not None else None
    if best_model is not None and best_model.config != best_cfg:
        # the winner came from ``completed`` and was not retrained here
        best_model, best_hist = None, None
    return GridResult(best_cfg, results, best_model, best_hist)


CHECKPOINT_MAGIC = b"TPBPMCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct(">8sHQQ")  # magic, version, metadata length, array blob length


def save_checkpoint(model: MultitaskModel, path, vocab=None, divisors=None, k_max=None,
                    extra: dict | None = None) -> None:
    """Write a versioned, checksummed checkpoint.

    Layout: header, JSON metadata, ``.npz`` array blob, SHA-256 of all
    preceding bytes.
    """
    meta = {
        "toolkit_version": __version__,
        "config": model.config.to_dict(),
        "num_classes": model.num_classes,
        "feature_width": model.feature_width,
        "class_weights": model.class_weights.tolist(),
        "vocabulary": vocab.labels if vocab is not None else None,
        "divisors": divisors.to_dict() if divisors is not None else None,
        "k_max": k_max,
        "layer_order": "recurrent-bn-dropout-dense",
    }
    if extra:
        meta.update(extra)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(buf, **model.state_dict())
    blob = buf.getvalue()
    body = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_bytes), len(blob)) + meta_bytes + blob
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(metadata, state arrays)`` after integrity checks."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size + 32:
        raise ChecksumError(f"{path}: checkpoint truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or corrupted)")
    magic, version, meta_len, blob_len = _HEADER.unpack_from(body)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint format {version}, expected {CHECKPOINT_VERSION}")
    if _HEADER.size + meta_len + blob_len != len(body):
        raise ChecksumError(f"{path}: inconsistent section lengths")
    off = _HEADER.size
    meta = json.loads(body[off:off + meta_len].decode())
    with np.load(io.BytesIO(body[off + meta_len:]), allow_pickle=False) as z:
        state = {k: z[k] for k in z.files}
    return meta, state


def load_checkpoint(path, feature_width: int | None = None, num_classes: int | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``.

    ``feature_width``/``num_classes`` assert the shapes the caller expects.
    """
    meta, state = read_checkpoint(path)
    if feature_width is not None and feature_width != meta["feature_width"]:
        raise ShapeError(f"checkpoint expects feature width {meta['feature_width']}, got {feature_width}")
    if num_classes is not None and num_classes != meta["num_classes"]:
        raise ShapeError(f"checkpoint has {meta['num_classes']} classes, got {num_classes}")
    cfg = ModelConfig(**meta["config"])
    model = build_model(cfg, meta["num_classes"], meta["feature_width"], meta["class_weights"])
    model.class_weights = np.asarray(meta["class_weights"], dtype=float)
    model.load_state_dict(state)
    return model, meta


def clone_model(model: MultitaskModel) -> MultitaskModel:
    return copy.deepcopy(model)
