import numpy as np
import pytest

from ivimdc.simulate import default_schedule

_CRITERIA = []


@pytest.fixture
def record_criterion():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def record(label, passed, detail=""):
        _CRITERIA.append((label, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")


@pytest.fixture
def full_schedule():
    return default_schedule(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
