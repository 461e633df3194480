import numpy as np
import pytest

from omlab.spaces import build_grid


@pytest.fixture(scope="session")
def unit_square():
    return build_grid([0, 0], [1, 1], 201)


@pytest.fixture(scope="session")
def gaussian_line():
    return build_grid([-4], [4], 8001)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
