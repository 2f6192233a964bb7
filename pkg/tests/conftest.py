from datetime import date, datetime, time
from zoneinfo import ZoneInfo

import numpy as np
import pytest

from studentnmf.sessionizer import Kind, RawEvent

CPH = ZoneInfo("Europe/Copenhagen")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def local_ts(day: date, hh: int, mm: int = 0, ss: int = 0) -> int:
    return int(datetime.combine(day, time(hh, mm, ss), tzinfo=CPH).timestamp())


@pytest.fixture
def text_event():
    def make(ts, subject="danish", student="s1", kind=Kind.TEXT, bloom=None):
        return RawEvent(student, int(ts), subject, kind, bloom_group=bloom)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail}")
