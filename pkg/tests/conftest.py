import numpy as np
import pytest

from dynmech.scenario import s1, s1_asymmetric
from dynmech.synthesis import synthesize


@pytest.fixture(scope="session")
def sc():
    return s1()


@pytest.fixture(scope="session")
def sc_asym():
    return s1_asymmetric()


@pytest.fixture(scope="session")
def synth(sc):
    return synthesize(sc)


@pytest.fixture(scope="session")
def synth_priced(sc):
    # thresholds (0.5, 0, top) give a strictly positive posted price at t = 0
    return synthesize(sc, epsilon=np.array([[0.5, 0.0, 1.0], [0.5, 0.0, 1.0]]))


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Run a criterion function and keep its PASS/FAIL line for the summary."""
    def run(fn):
        from test_acceptance import RESULTS
        before = len(RESULTS)
        ok = fn()
        _ACCEPTANCE_LINES.extend(RESULTS[before:])
        return ok
    return run


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
