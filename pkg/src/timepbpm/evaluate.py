"""Accuracy and MAE-in-days over test prefixes, plus report formatting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoding import SECONDS_PER_DAY, ActivityVocabulary, EncodedDataset, TimeDivisors
from .errors import VocabularyMismatchError

VARIANTS = ("Tax", "Tax+CS", "Tax+T-LSTM", "Tax+CS+T-LSTM")
ROW_FIELDS = ("dataset", "variant", "accuracy", "mae_days", "n_prefixes", "config")


def accuracy(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("predicted and true labels differ in length")
    if truth.size == 0:
        raise ValueError("accuracy of an empty label set")
    return float(np.mean(predicted == truth))


def mae_days(pred, target, d_between: float) -> float:
    """Mean absolute error of normalised time predictions, converted to days."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("predictions and targets differ in length")
    if pred.size == 0:
        raise ValueError("MAE of an empty set")
    return float(np.mean(np.abs(pred - target)) * d_between / SECONDS_PER_DAY)


@dataclass
class EvalReport:
    dataset: str
    variant: str
    accuracy: float
    mae_days: float
    n_prefixes: int
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d["config"] = json.dumps(self.config, sort_keys=True)
        return d


def evaluate(model, test: EncodedDataset, vocab: ActivityVocabulary, divisors: TimeDivisors,
             dataset: str = "", variant: str | None = None,
             clamp_negative: bool = False) -> EvalReport:
    """Inference-mode predictions over every test prefix.

    Predicted class is the argmax (lowest index on ties). Negative time
    predictions count as-is unless ``clamp_negative``.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    if model.num_classes != vocab.size:
        raise VocabularyMismatchError(
            f"model predicts {model.num_classes} classes, vocabulary has {vocab.size}")
    if model.feature_width != test.width:
        raise VocabularyMismatchError(
            f"model expects feature width {model.feature_width}, data has {test.width}")
    probs, tpred = model.predict_dataset(test)
    if clamp_negative:
        tpred = np.maximum(tpred, 0.0)
    y_act, y_time = test.labels()
    return EvalReport(
        dataset=dataset,
        variant=variant or model.config.variant,
        accuracy=accuracy(probs.argmax(axis=1), y_act),
        mae_days=mae_days(tpred, y_time, divisors.d_between),
        n_prefixes=len(test),
        config=model.config.to_dict(),
    )


def format_table(reports) -> str:
    """Aligned plain-text table, one line per report."""
    header = ("dataset", "variant", "accuracy", "mae_days", "n_prefixes")
    rows = [(r.dataset, r.variant, f"{r.accuracy:.3f}", f"{r.mae_days:.2f}", str(r.n_prefixes))
            for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def format_rows(reports, delimiter="\t") -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, delimiter=delimiter, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.row()
        row["accuracy"] = f"{r.accuracy:.6f}"
        row["mae_days"] = f"{r.mae_days:.6f}"
        w.writerow(row)
    return buf.getvalue()


def read_rows(text: str, delimiter="\t") -> list[EvalReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text), delimiter=delimiter):
        out.append(EvalReport(row["dataset"], row["variant"], float(row["accuracy"]),
                              float(row["mae_days"]), int(row["n_prefixes"]),
                              json.loads(row["config"]) if row.get("config") else {}))
    return out
