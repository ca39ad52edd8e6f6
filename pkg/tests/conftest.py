import numpy as np
import pytest

from hila.threads import single_thread_blas

# Filled by tests/test_acceptance.py; echoed after the run so the one-line
# verdicts survive pytest's output capture.
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session", autouse=True)
def _pinned_blas():
    # One BLAS thread: faster at these tensor sizes and keeps reductions
    # bitwise reproducible across the suite.
    with single_thread_blas():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
