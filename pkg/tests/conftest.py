import sys
from pathlib import Path

import pytest

# make the oracle helpers importable as a plain module
sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance-criteria gate (slow)")


@pytest.fixture
def acceptance():
    """Record a criterion's verdict and measurement, then fail the test if it did not pass."""

    def record(number, ok, detail):
        _RESULTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
