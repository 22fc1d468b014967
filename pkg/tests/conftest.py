import numpy as np
import pytest

from disent.data import DatasetSpec, build_dataset

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def dataset():
    return build_dataset(DatasetSpec())


@pytest.fixture(scope="session")
def full_grid(dataset):
    return dataset.all_factors()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
