from pathlib import Path

import numpy as np
import pytest

from fedfuse.nn import CnnConfig

GOLDEN = Path(__file__).parent / "golden"

# one line per shipping requirement, printed after the run so the verdicts
# survive pytest's output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def reduced_config() -> CnnConfig:
    """Small architecture used wherever full-size training would be wasteful."""
    return CnnConfig(input_size=8, conv_channels=(2, 3, 4), dense_units=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
