import numpy as np
import pytest

_acceptance_lines = []


@pytest.fixture
def record():
    """Record one acceptance line: record(number, title, passed, detail).

    ``passed=None`` marks a criterion that is out of scope by definition.
    """

    def _record(number, title, passed, detail=""):
        status = "N/A " if passed is None else ("PASS" if passed else "FAIL")
        _acceptance_lines.append(f"[{status}] criterion {number:>2}: {title} {detail}".rstrip())
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
