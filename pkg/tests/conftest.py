import numpy as np
import pytest

from chainloc.data import RSS_DIM, Dataset

# One line per acceptance criterion, echoed after the test summary so the
# verdicts stay visible without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(n: int, seed: int = 0, n_buildings: int = 3, n_floors: int = 4) -> Dataset:
    """Small random dataset with valid label ranges, for unit tests."""
    rng = np.random.default_rng(seed)
    rss = rng.uniform(-100.0, -30.0, size=(n, RSS_DIM))
    coords = rng.uniform(0.0, 100.0, size=(n, 2))
    floor = rng.integers(0, n_floors, size=n)
    building = rng.integers(0, n_buildings, size=n)
    return Dataset(rss, coords, floor, building)


@pytest.fixture
def tiny_dataset() -> Dataset:
    return make_dataset(40, seed=7)
