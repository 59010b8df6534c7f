import math

import numpy as np
import pytest

from pulseforge.datasetpipe import AngleDataset, ReductionMap, split
from pulseforge.qusim import RAD_PER_MHZ_NS, TransmonConfig

# A constant in-phase drive of amplitude theta / (2 pi T 1e-3) MHz gives Rx(theta) exactly on a qubit.
SQUARE_GAIN = 1.0 / (RAD_PER_MHZ_NS * 125.0)


def square_rows(angles):
    angles = np.asarray(angles, dtype=float)
    return np.outer(angles, np.full(5, SQUARE_GAIN))


@pytest.fixture(scope="session")
def qubit():
    return TransmonConfig()


@pytest.fixture(scope="session")
def square_map():
    return ReductionMap(
        n_columns=20,
        outputs=((0, 1), (2, 3), (4, 5), (6, 7), (8, 9)),
        fixed_columns=tuple(range(10, 20)),
        fixed_means=(0.0,) * 10,
    )


@pytest.fixture(scope="session")
def square_dataset(square_map):
    """Reduced dataset whose targets are exact square pulses; a linear 1-4-5 net can fit it."""
    angles = np.linspace(-math.pi, math.pi, 30)
    ds = AngleDataset(angles, square_rows(angles), square_map)
    return split(ds, (0.8, 0.1, 0.1), seed=0)


# Acceptance lines are collected here and echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
