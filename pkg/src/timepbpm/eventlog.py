"""Event-log ingestion, validation and the temporal train/validation/test split."""

from __future__ import annotations

import calendar
import csv
import io
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime
from typing import IO, Iterable

from .errors import EmptyLogError, ParseError, SchemaError, SplitError

DEFAULT_TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"


@dataclass(frozen=True)
class CsvSchema:
    case: str = "CaseID"
    activity: str = "ActivityID"
    timestamp: str = "CompleteTimestamp"
    timestamp_format: str = DEFAULT_TIMESTAMP_FORMAT


@dataclass(frozen=True)
class Event:
    case_id: str
    activity: str
    timestamp: int  # seconds since the epoch, UTC


@dataclass(frozen=True)
class Trace:
    events: tuple[Event, ...]

    @property
    def case_id(self) -> str:
        return self.events[0].case_id

    @property
    def start(self) -> int:
        return self.events[0].timestamp

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def violations(self) -> list[str]:
        """Return human-readable descriptions of broken trace invariants."""
        if not self.events:
            return ["empty trace"]
        problems = []
        cid = self.events[0].case_id
        for i, ev in enumerate(self.events):
            if ev.case_id != cid:
                problems.append(f"case {cid}: event {i} belongs to case {ev.case_id}")
            if not ev.activity:
                problems.append(f"case {cid}: event {i} has an empty activity")
            if not isinstance(ev.timestamp, int):
                problems.append(f"case {cid}: event {i} has a non-integer timestamp")
            if i and ev.timestamp < self.events[i - 1].timestamp:
                problems.append(f"case {cid}: timestamps decrease at event {i}")
        return problems


@dataclass(frozen=True)
class EventLog:
    traces: tuple[Trace, ...]
    source_name: str = ""

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    @property
    def num_events(self) -> int:
        return sum(len(t) for t in self.traces)

    def case_ids(self) -> list[str]:
        return [t.case_id for t in self.traces]

    def activities(self) -> Iterable[str]:
        for t in self.traces:
            for ev in t.events:
                yield ev.activity


@dataclass(frozen=True)
class SplitLog:
    train: EventLog
    validation: EventLog
    test: EventLog

    @property
    def pool(self) -> EventLog:
        """Training pool: train followed by validation, in temporal order."""
        return EventLog(self.train.traces + self.validation.traces,
                        self.train.source_name)


def parse_timestamp(text: str, fmt: str = DEFAULT_TIMESTAMP_FORMAT) -> int:
    """Parse ``text`` into integer seconds since the epoch.

    Naive timestamps are read as UTC. Sub-second precision is dropped.
    """
    dt = datetime.strptime(text.strip(), fmt)
    if dt.tzinfo is not None:
        return int(math.floor(dt.timestamp()))
    return calendar.timegm(dt.timetuple())


def format_timestamp(seconds: int, fmt: str = DEFAULT_TIMESTAMP_FORMAT) -> str:
    return time.strftime(fmt, time.gmtime(seconds))


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), False
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def parse_csv(source, schema: CsvSchema | None = None,
              source_name: str | None = None) -> EventLog:
    """Read an event-log CSV into an :class:`EventLog`.

    ``source`` may be a path, raw bytes, or a binary/text stream. Rows are
    grouped by case in order of first appearance; events within a case
    are stably sorted by timestamp.
    """
    schema = schema or CsvSchema()
    if source_name is None:
        source_name = os.fspath(source) if isinstance(source, (str, os.PathLike)) else ""
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyLogError(f"{source_name or 'input'}: file is empty") from None
        header = [h.strip().lstrip("﻿") for h in header]
        cols = {}
        for role, name in (("case", schema.case), ("activity", schema.activity),
                           ("timestamp", schema.timestamp)):
            if name not in header:
                raise SchemaError(f"missing {role} column {name!r}; header is {header}")
            cols[role] = header.index(name)
        need = max(cols.values()) + 1

        grouped: OrderedDict[str, list[Event]] = OrderedDict()
        ts_cache: dict[str, int] = {}
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < need:
                raise ParseError(f"expected at least {need} fields, got {len(row)}", rowno)
            case_id = row[cols["case"]].strip()
            activity = row[cols["activity"]].strip()
            raw_ts = row[cols["timestamp"]]
            if not activity:
                raise ParseError("empty activity", rowno)
            ts = ts_cache.get(raw_ts)
            if ts is None:
                try:
                    ts = parse_timestamp(raw_ts, schema.timestamp_format)
                except ValueError as exc:
                    raise ParseError(f"malformed timestamp {raw_ts!r} ({exc})", rowno) from None
                ts_cache[raw_ts] = ts
            grouped.setdefault(case_id, []).append(Event(case_id, activity, ts))
    finally:
        if owned:
            fh.close()

    if not grouped:
        raise EmptyLogError(f"{source_name or 'input'}: no events")
    traces = tuple(
        Trace(tuple(sorted(events, key=lambda e: e.timestamp)))
        for events in grouped.values()
    )
    return EventLog(traces, source_name)


def write_csv(log: EventLog, dest, schema: CsvSchema | None = None) -> None:
    """Write ``log`` in the same layout :func:`parse_csv` reads."""
    schema = schema or CsvSchema()
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write_csv(log, fh, schema)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow([schema.case, schema.activity, schema.timestamp])
    for trace in log.traces:
        for ev in trace.events:
            writer.writerow([ev.case_id, ev.activity,
                             format_timestamp(ev.timestamp, schema.timestamp_format)])


def to_csv_text(log: EventLog, schema: CsvSchema | None = None) -> str:
    buf = io.StringIO()
    write_csv(log, buf, schema)
    return buf.getvalue()


def temporal_split(log: EventLog, train_fraction: float = 2 / 3,
                   validation_fraction_of_train: float = 0.2) -> SplitLog:
    """Split cases by start time into train, validation and test parts.

    The first ``floor(train_fraction * n)`` cases form the training pool;
    its last ``max(1, floor(validation_fraction_of_train * pool))`` cases
    become the validation part. Cases starting at the same instant are
    ordered by case id.
    """
    if not 0 < train_fraction < 1 or not 0 < validation_fraction_of_train < 1:
        raise SplitError("fractions must lie strictly between 0 and 1")
    n = len(log.traces)
    if n < 3:
        raise SplitError(f"need at least 3 cases to split, got {n}")
    ordered = sorted(log.traces, key=lambda t: (t.start, t.case_id))
    # the small offset keeps e.g. 3804 * (2/3) from flooring to 2535
    pool = math.floor(n * train_fraction + 1e-9)
    n_val = max(1, math.floor(pool * validation_fraction_of_train + 1e-9))
    n_train = pool - n_val
    if n_train < 1 or n - pool < 1:
        raise SplitError(
            f"fractions {train_fraction}/{validation_fraction_of_train} leave an empty part for {n} cases")
    name = log.source_name
    return SplitLog(
        train=EventLog(tuple(ordered[:n_train]), name),
        validation=EventLog(tuple(ordered[n_train:pool]), name),
        test=EventLog(tuple(ordered[pool:]), name),
    )


@dataclass
class ValidationReport:
    source_name: str
    num_traces: int
    num_events: int
    num_activities: int
    min_events: int
    max_events: int
    mean_events: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "source": self.source_name,
            "traces": self.num_traces,
            "events": self.num_events,
            "unique_activities": self.num_activities,
            "min_events_per_case": self.min_events,
            "max_events_per_case": self.max_events,
            "mean_events_per_case": round(self.mean_events, 6),
            "valid": self.ok,
            "violations": list(self.violations),
        }

    def to_text(self) -> str:
        lines = [
            f"source: {self.source_name}",
            f"traces: {self.num_traces}",
            f"events: {self.num_events}",
            f"unique activities: {self.num_activities}",
            f"events per case: min {self.min_events} / max {self.max_events} / mean {self.mean_events:.3f}",
            f"valid: {'yes' if self.ok else 'no'}",
        ]
        lines += [f"violation: {v}" for v in self.violations]
        return "\n".join(lines)


def validate_log(log: EventLog) -> ValidationReport:
    lengths = [len(t) for t in log.traces]
    violations = []
    seen = set()
    for t in log.traces:
        violations.extend(t.violations())
        if t.events:
            if t.case_id in seen:
                violations.append(f"case {t.case_id} appears in more than one trace")
            seen.add(t.case_id)
    return ValidationReport(
        source_name=log.source_name,
        num_traces=len(lengths),
        num_events=sum(lengths),
        num_activities=len(set(log.activities())),
        min_events=min(lengths, default=0),
        max_events=max(lengths, default=0),
        mean_events=sum(lengths) / len(lengths) if lengths else 0.0,
        violations=violations,
    )
