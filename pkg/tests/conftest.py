import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import ACCEPTANCE_LINES  # noqa: E402
from sobolev_td.oracle import ToyOracle, value_iteration_toy  # noqa: E402


@pytest.fixture(scope="session")
def toy_solution():
    return value_iteration_toy(1001, 0.9, 1e-12)


@pytest.fixture(scope="session")
def toy_oracle(toy_solution):
    return ToyOracle(toy_solution)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
