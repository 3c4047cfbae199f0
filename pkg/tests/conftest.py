import numpy as np
import pytest

from helpers import ACCEPTANCE


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
