import time
from contextlib import contextmanager

import pytest

_ACCEPTANCE: list[str] = []


@contextmanager
def _timed(number: int, title: str, budget_s: float):
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        within = elapsed < budget_s
        status = "PASS" if ok and within else "FAIL"
        note = "" if within else f" over budget {budget_s:.0f}s"
        _ACCEPTANCE.append(f"[{status}] criterion {number:2d}: {title} ({elapsed:.2f}s){note}")
    assert within, f"criterion {number} took {elapsed:.1f}s, budget {budget_s:.0f}s"


@pytest.fixture
def criterion():
    """Context manager timing one acceptance criterion and recording a pass/fail line."""
    return _timed


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
