import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from htlane.hough import DESK, PAPER, HoughConfig, build_vote_table  # noqa: E402


@pytest.fixture(scope="session")
def desk_table():
    return build_vote_table(DESK)


@pytest.fixture(scope="session")
def paper_table():
    return build_vote_table(PAPER)


@pytest.fixture(scope="session")
def small_table():
    return build_vote_table(HoughConfig(H=6, W=10, n_rho=11, n_theta=8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config._acceptance_lines:
            terminalreporter.write_line(line)
