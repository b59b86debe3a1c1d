import numpy as np
import pytest

from phnturbo import fec


@pytest.fixture(scope="session")
def wimax():
    return fec.load_bundled()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
