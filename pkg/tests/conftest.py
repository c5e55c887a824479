import numpy as np
import pytest

_ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    """Register one acceptance verdict; all are printed at the end of the run."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
