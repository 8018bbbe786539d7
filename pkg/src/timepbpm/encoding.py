"""Prefix generation, feature encoding, class weights and batching.

Every event is mapped to one feature row::

    [one-hot activity | position in case | time since last event / d_between
     | time since case start / d_since_start | seconds since midnight / 86400
     | day of week / 7]

Rows of a prefix are left-padded to ``k_max``. The raw elapsed seconds
between consecutive events are kept alongside for the T-LSTM decay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import EncodingError, VersionError
from .eventlog import Event, EventLog, Trace

SECONDS_PER_DAY = 86400
NUM_TIME_FEATURES = 5
CACHE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ActivityVocabulary:
    label_to_index: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.label_to_index)

    @property
    def labels(self) -> list[str]:
        return sorted(self.label_to_index, key=self.label_to_index.__getitem__)

    def index(self, label: str) -> int:
        try:
            return self.label_to_index[label]
        except KeyError:
            raise EncodingError(f"activity {label!r} not in the training vocabulary") from None

    def to_dict(self) -> dict:
        return {"labels": self.labels}

    @classmethod
    def from_labels(cls, labels: Sequence[str]) -> "ActivityVocabulary":
        return cls({lab: i for i, lab in enumerate(labels)})


@dataclass(frozen=True)
class TimeDivisors:
    d_between: float
    d_since_start: float

    def to_dict(self) -> dict:
        return {"d_between": self.d_between, "d_since_start": self.d_since_start}


@dataclass
class EncodedPrefix:
    features: np.ndarray  # (k_max, n), real rows last
    length: int
    deltas: np.ndarray  # (length,), seconds
    next_activity: int
    next_time_delta: float  # in units of d_between

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.features.shape[0], dtype=bool)
        m[m.size - self.length:] = True
        return m

    @property
    def padded_deltas(self) -> np.ndarray:
        d = np.zeros(self.features.shape[0])
        d[d.size - self.length:] = self.deltas
        return d


def feature_width(vocab: ActivityVocabulary) -> int:
    return vocab.size + NUM_TIME_FEATURES


def build_vocabulary(train: EventLog) -> ActivityVocabulary:
    """Index activities in order of first occurrence."""
    mapping: dict[str, int] = {}
    for act in train.activities():
        if act not in mapping:
            mapping[act] = len(mapping)
    return ActivityVocabulary(mapping)


def compute_divisors(train: EventLog) -> TimeDivisors:
    gaps = []
    since_start = []
    for trace in train.traces:
        t0 = trace.start
        prev = None
        for ev in trace.events:
            since_start.append(ev.timestamp - t0)
            if prev is not None:
                gaps.append(ev.timestamp - prev)
            prev = ev.timestamp
    d_between = float(np.mean(gaps)) if gaps else 0.0
    d_since = float(np.mean(since_start)) if since_start else 0.0
    return TimeDivisors(d_between or 1.0, d_since or 1.0)


def generate_prefixes(trace: Trace) -> list[tuple[list[Event], str, int]]:
    """All ``(prefix, next activity, next timestamp)`` triples of a trace."""
    ev = trace.events
    return [(list(ev[:k]), ev[k].activity, ev[k].timestamp) for k in range(1, len(ev))]


def max_prefix_length(log: EventLog) -> int:
    return max(1, max((len(t) for t in log.traces), default=1) - 1)


def event_rows(events: Sequence[Event], vocab: ActivityVocabulary,
               divisors: TimeDivisors) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and raw elapsed seconds for the events of one case, in order."""
    k = len(events)
    K = vocab.size
    rows = np.zeros((k, K + NUM_TIME_FEATURES))
    deltas = np.zeros(k)
    if k == 0:
        return rows, deltas
    ts = np.array([e.timestamp for e in events], dtype=np.int64)
    start = ts[0]
    prev = np.empty_like(ts)
    prev[0] = ts[0]
    prev[1:] = ts[:-1]
    gap = (ts - prev).astype(float)
    if np.any(gap < 0):
        raise EncodingError("event timestamps decrease within a case")
    for i, e in enumerate(events):
        rows[i, vocab.index(e.activity)] = 1.0
    rows[:, K] = np.arange(1, k + 1)
    rows[:, K + 1] = gap / divisors.d_between
    rows[:, K + 2] = (ts - start) / divisors.d_since_start
    rows[:, K + 3] = (ts % SECONDS_PER_DAY) / SECONDS_PER_DAY
    # 1970-01-01 was a Thursday; Monday = 0
    rows[:, K + 4] = ((ts // SECONDS_PER_DAY + 3) % 7) / 7.0
    deltas[:] = gap
    return rows, deltas


def encode_prefix(prefix: Sequence[Event], vocab: ActivityVocabulary,
                  divisors: TimeDivisors, k_max: int,
                  next_activity: str | None = None,
                  next_timestamp: int | None = None) -> EncodedPrefix:
    """Encode one prefix (the first events of a case) into a padded matrix.

    Prefixes longer than ``k_max`` keep only their last ``k_max`` events;
    the retained rows still carry their true position and elapsed times.
    """
    if not prefix:
        raise EncodingError("empty prefix")
    rows, deltas = event_rows(prefix, vocab, divisors)
    k = min(len(prefix), k_max)
    rows, deltas = rows[-k:], deltas[-k:]
    feats = np.zeros((k_max, rows.shape[1]))
    feats[k_max - k:] = rows
    label = vocab.index(next_activity) if next_activity is not None else -1
    if next_timestamp is not None:
        gap = next_timestamp - prefix[-1].timestamp
        if gap < 0:
            raise EncodingError("next timestamp precedes the last prefix event")
        t_label = gap / divisors.d_between
    else:
        t_label = float("nan")
    return EncodedPrefix(feats, k, deltas, label, t_label)


@dataclass
class EncodedDataset:
    """Compact storage of every prefix of a log.

    Feature rows are stored once per event; a prefix is the contiguous run
    of its case's rows ending at ``end[i]`` (exclusive) of ``length[i]``.
    """

    rows: np.ndarray  # (num_events, n)
    deltas: np.ndarray  # (num_events,)
    end: np.ndarray  # (N,)
    length: np.ndarray  # (N,)
    next_activity: np.ndarray  # (N,) int
    next_time_delta: np.ndarray  # (N,)
    k_max: int
    case_ids: list[str]  # per prefix
    last_timestamp: np.ndarray  # (N,) seconds

    def __len__(self) -> int:
        return int(self.end.shape[0])

    @property
    def width(self) -> int:
        return int(self.rows.shape[1])

    def arrays(self, index=None, pad_to: int | None = None):
        """Padded ``(X, deltas, mask)`` for the selected prefixes.

        The time axis is trimmed to the longest selected prefix unless
        ``pad_to`` is given.
        """
        idx = np.arange(len(self)) if index is None else np.asarray(index)
        lengths = self.length[idx]
        T = int(lengths.max()) if pad_to is None else pad_to
        B = idx.shape[0]
        X = np.zeros((B, T, self.width))
        D = np.zeros((B, T))
        M = np.zeros((B, T), dtype=bool)
        for b, (e, k) in enumerate(zip(self.end[idx], lengths)):
            X[b, T - k:] = self.rows[e - k:e]
            D[b, T - k:] = self.deltas[e - k:e]
            M[b, T - k:] = True
        return X, D, M

    def labels(self, index=None):
        idx = slice(None) if index is None else np.asarray(index)
        return self.next_activity[idx], self.next_time_delta[idx]

    def prefix(self, i: int) -> EncodedPrefix:
        e, k = int(self.end[i]), int(self.length[i])
        feats = np.zeros((self.k_max, self.width))
        feats[self.k_max - k:] = self.rows[e - k:e]
        return EncodedPrefix(feats, k, self.deltas[e - k:e].copy(),
                             int(self.next_activity[i]), float(self.next_time_delta[i]))

    def subset(self, index) -> "EncodedDataset":
        """Copy restricted to the given prefixes (event rows are shared)."""
        idx = np.asarray(index, dtype=np.int64)
        return replace(self, end=self.end[idx], length=self.length[idx],
                       next_activity=self.next_activity[idx],
                       next_time_delta=self.next_time_delta[idx],
                       case_ids=[self.case_ids[i] for i in idx],
                       last_timestamp=self.last_timestamp[idx])

    def select_features(self, columns) -> "EncodedDataset":
        """Copy keeping only the given feature columns (deltas are unaffected)."""
        return replace(self, rows=np.ascontiguousarray(self.rows[:, columns]))

    def save(self, path, vocab: ActivityVocabulary, divisors: TimeDivisors) -> None:
        meta = {
            "format_version": CACHE_FORMAT_VERSION,
            "vocabulary": vocab.labels,
            "divisors": divisors.to_dict(),
            "k_max": self.k_max,
            "case_ids": self.case_ids,
        }
        np.savez(path, rows=self.rows, deltas=self.deltas, end=self.end,
                 length=self.length, next_activity=self.next_activity,
                 next_time_delta=self.next_time_delta,
                 last_timestamp=self.last_timestamp,
                 meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("format_version") != CACHE_FORMAT_VERSION:
                raise VersionError(f"unsupported cache format {meta.get('format_version')}")
            ds = cls(z["rows"], z["deltas"], z["end"], z["length"], z["next_activity"],
                     z["next_time_delta"], int(meta["k_max"]), list(meta["case_ids"]),
                     z["last_timestamp"])
        vocab = ActivityVocabulary.from_labels(meta["vocabulary"])
        divisors = TimeDivisors(**meta["divisors"])
        return ds, vocab, divisors


def encode_log(log: EventLog, vocab: ActivityVocabulary, divisors: TimeDivisors,
               k_max: int) -> EncodedDataset:
    """Encode every prefix of every trace, in trace order then prefix length."""
    row_blocks, delta_blocks = [], []
    ends, lengths, acts, tdeltas, cases, last_ts = [], [], [], [], [], []
    offset = 0
    for trace in log.traces:
        rows, deltas = event_rows(trace.events, vocab, divisors)
        row_blocks.append(rows)
        delta_blocks.append(deltas)
        ev = trace.events
        for k in range(1, len(ev)):
            ends.append(offset + k)
            lengths.append(min(k, k_max))
            acts.append(vocab.index(ev[k].activity))
            tdeltas.append((ev[k].timestamp - ev[k - 1].timestamp) / divisors.d_between)
            cases.append(trace.case_id)
            last_ts.append(ev[k - 1].timestamp)
        offset += len(ev)
    width = feature_width(vocab)
    return EncodedDataset(
        rows=np.concatenate(row_blocks) if row_blocks else np.zeros((0, width)),
        deltas=np.concatenate(delta_blocks) if delta_blocks else np.zeros(0),
        end=np.asarray(ends, dtype=np.int64),
        length=np.asarray(lengths, dtype=np.int64),
        next_activity=np.asarray(acts, dtype=np.int64),
        next_time_delta=np.asarray(tdeltas, dtype=float),
        k_max=k_max,
        case_ids=cases,
        last_timestamp=np.asarray(last_ts, dtype=np.int64),
    )


def stack_prefixes(prefixes: Sequence[EncodedPrefix]):
    """Stack encoded prefixes into ``(X, deltas, mask, y_act, y_time)`` arrays."""
    X = np.stack([p.features for p in prefixes])
    D = np.stack([p.padded_deltas for p in prefixes])
    M = np.stack([p.mask for p in prefixes])
    ya = np.array([p.next_activity for p in prefixes], dtype=np.int64)
    yt = np.array([p.next_time_delta for p in prefixes], dtype=float)
    return X, D, M, ya, yt


def compute_class_weights(labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * n_c)``; absent classes get 0."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EncodingError("cannot compute class weights from no labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise EncodingError("class index out of range")
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    weights = np.zeros(num_classes)
    present = counts > 0
    weights[present] = labels.size / (num_classes * counts[present])
    return weights


def batch_prefixes(items: Sequence, batch_size: int, shuffle_seed: int | None = None) -> list[list]:
    """Partition ``items`` into batches of at most ``batch_size``.

    Without a seed the input order is kept; with one the items are
    permuted first. The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(items))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(items))
    return [[items[i] for i in order[s:s + batch_size]]
            for s in range(0, len(items), batch_size)]

