import contextlib
import time

import pytest

_verdicts: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"criterion {number}: {status}  {title} ({time.perf_counter() - start:.1f}s)"
            _verdicts[number] = line
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance")
        for number in sorted(_verdicts):
            terminalreporter.write_line(_verdicts[number])
