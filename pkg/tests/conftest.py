import os

import numpy as np
import pytest

from timepbpm.eventlog import Event, EventLog, Trace

DATA_ENV = "TIMEPBPM_BENCHMARK_DIR"


def make_log(cases, name="t"):
    """Build a log from ``{case_id: [(activity, ts), ...]}``."""
    return EventLog(tuple(Trace(tuple(Event(c, a, ts) for a, ts in evs)) for c, evs in cases.items()), name)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def benchmark_dir():
    d = os.environ.get(DATA_ENV)
    if not d or not os.path.isdir(d):
        pytest.skip(f"benchmark CSVs not supplied (set {DATA_ENV})")
    return d
