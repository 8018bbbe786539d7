"""Matplotlib figures written next to the delimited reports."""

from __future__ import annotations

import os
from collections import Counter

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path):
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_history(history, path, title=None):
    """Training and validation losses per epoch, best epoch marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        ep = np.arange(1, history.epochs + 1)
        ax.plot(ep, history.train_loss, label="train total")
        ax.plot(ep, history.val_total, label="validation total")
        ax.plot(ep, history.val_ce, lw=0.8, ls="--", label="validation CE")
        ax.plot(ep, history.val_mae, lw=0.8, ls=":", label="validation MAE")
        if history.best_epoch:
            ax.axvline(history.best_epoch, color="k", lw=0.7, alpha=0.6)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_variant_comparison(reports, path):
    """Side-by-side accuracy and MAE bars per variant, one colour per dataset."""
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    variants = list(dict.fromkeys(r.variant for r in reports))
    lookup = {(r.dataset, r.variant): r for r in reports}
    width = 0.8 / max(len(datasets), 1)
    x = np.arange(len(variants))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for metric, ax, label in ((lambda r: r.accuracy, axes[0], "accuracy"),
                                  (lambda r: r.mae_days, axes[1], "MAE (days)")):
            for k, ds in enumerate(datasets):
                vals = [metric(lookup[(ds, v)]) if (ds, v) in lookup else np.nan for v in variants]
                ax.bar(x + (k - (len(datasets) - 1) / 2) * width, vals, width, label=ds or "data")
            ax.set_xticks(x, variants, rotation=20, ha="right")
            ax.set_ylabel(label)
        axes[0].legend()
        return _save(fig, path)


def plot_activity_distribution(first, second, vocab, path, title=None, names=("train", "test")):
    """Relative frequency of two sets of activity labels, side by side."""
    labels = vocab.labels
    tr = Counter(int(i) for i in first)
    te = Counter(int(i) for i in second)
    ntr, nte = max(sum(tr.values()), 1), max(sum(te.values()), 1)
    x = np.arange(len(labels))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        ax.bar(x - 0.2, [tr[i] / ntr for i in x], 0.4, label=names[0])
        ax.bar(x + 0.2, [te[i] / nte for i in x], 0.4, label=names[1])
        ax.set_xticks(x, labels, rotation=45, ha="right")
        ax.set_ylabel("relative frequency")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_gap_distribution(log, path, title=None):
    """Histogram of elapsed seconds between consecutive events (log-scaled)."""
    gaps = np.array([b.timestamp - a.timestamp for t in log.traces
                     for a, b in zip(t.events, t.events[1:])], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        if gaps.size:
            bins = np.logspace(0, np.log10(max(gaps.max(), 10.0)), 40)
            ax.hist(np.maximum(gaps, 1.0), bins=bins)
            ax.set_xscale("log")
        ax.set_xlabel("elapsed time between events (s)")
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        return _save(fig, path)
