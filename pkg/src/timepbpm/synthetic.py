"""Synthetic event logs with known structure, for smoke tests and demos."""

from __future__ import annotations

import numpy as np

from .eventlog import Event, EventLog, Trace

BASE_TIME = 1_577_836_800  # 2020-01-01 00:00:00 UTC


def cyclic_log(num_traces=200, num_activities=5, gap_seconds=3600, max_length=10,
               start=BASE_TIME) -> EventLog:
    """Traces that walk the activities cyclically with a constant gap.

    Trace ``i`` starts at activity ``i % num_activities``, has
    ``2 + i % (max_length - 1)`` events and begins one day after trace ``i-1``.
    """
    acts = [chr(ord("A") + k) for k in range(num_activities)]
    traces = []
    for i in range(num_traces):
        n = 2 + i % (max_length - 1)
        t0 = start + i * 86400
        cid = f"c{i:05d}"
        traces.append(Trace(tuple(
            Event(cid, acts[(i + j) % num_activities], t0 + j * gap_seconds) for j in range(n))))
    return EventLog(tuple(traces), "cyclic")


def random_log(num_traces, rng: np.random.Generator, min_length=1, max_length=20,
               num_activities=4, max_gap=10 * 86400, start=BASE_TIME) -> EventLog:
    """Random traces with uniform activities and gaps (including zero gaps)."""
    traces = []
    for i in range(num_traces):
        n = int(rng.integers(min_length, max_length + 1))
        t = start + int(rng.integers(0, 365 * 86400))
        cid = f"r{i:05d}"
        events = []
        for _ in range(n):
            events.append(Event(cid, f"a{int(rng.integers(num_activities))}", t))
            t += int(rng.integers(0, max_gap + 1))
        traces.append(Trace(tuple(events)))
    return EventLog(tuple(traces), "random")


def gap_threshold_log(num_traces, rng: np.random.Generator, threshold=3600,
                      short=(1, 600), long=(86400, 864000), min_length=2, max_length=6,
                      history_activities=("X", "Y"), start=BASE_TIME) -> EventLog:
    """Traces whose final activity depends only on the gap before the previous event.

    Every event but the last carries a random activity from
    ``history_activities``; gaps are drawn from ``short`` or ``long``. The last
    event is ``"LATE"`` if the gap into the preceding event exceeded
    ``threshold`` seconds, otherwise ``"SOON"``.
    """
    traces = []
    for i in range(num_traces):
        n = int(rng.integers(min_length, max_length + 1))
        t = start + int(rng.integers(0, 365 * 86400))
        cid = f"g{i:05d}"
        events = [Event(cid, str(rng.choice(history_activities)), t)]
        last_gap = 0
        for _ in range(n - 1):
            lo, hi = long if rng.random() < 0.5 else short
            last_gap = int(rng.integers(lo, hi + 1))
            t += last_gap
            events.append(Event(cid, str(rng.choice(history_activities)), t))
        label = "LATE" if last_gap > threshold else "SOON"
        t += int(rng.integers(short[0], short[1] + 1))
        events.append(Event(cid, label, t))
        traces.append(Trace(tuple(events)))
    return EventLog(tuple(traces), "gap-threshold")
