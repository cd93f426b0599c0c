import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------------ acceptance report
SUITE_BUDGET_S = 300.0
_acceptance = {}
_t0 = [0.0]


def pytest_sessionstart(session):
    import time

    _t0[0] = time.perf_counter()


@pytest.fixture
def accept():
    """Record one acceptance criterion's outcome, then assert it."""

    def record(number, title, ok, detail=""):
        _acceptance[number] = (title, bool(ok), detail)
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return record


@pytest.hookimpl(tryfirst=True)
def pytest_sessionfinish(session, exitstatus):
    import time

    _t0.append(time.perf_counter() - _t0[0])
    if _acceptance and _t0[-1] >= SUITE_BUDGET_S and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance:
        return
    elapsed = _t0[-1]
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok, detail = _acceptance[number]
        if number == 11:
            detail += f"; full run {elapsed:.1f}s (budget {SUITE_BUDGET_S:.0f}s)"
            ok = ok and elapsed < SUITE_BUDGET_S
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
