import numpy as np
import pytest

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance criterion outcome; the summary is printed at session end."""

    def _record(number, ok, detail):
        _ACCEPTANCE.append((number, bool(ok), detail))
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
