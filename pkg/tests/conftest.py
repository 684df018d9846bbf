import numpy as np
import pytest

from geoprofile.model import Dataset, read_csv

ACCEPTANCE_LINES: list[str] = []


def random_dataset(rng, n=15, p=2, positive=True):
    coords = rng.uniform(0, 100, size=(n, 2))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]) if p else np.zeros((n, 0))
    y = rng.uniform(0.5, 5.0, size=n) if positive else rng.normal(size=n)
    return Dataset(coords, y, X)


def random_natural(rng):
    return np.array([
        rng.uniform(10, 80),
        rng.uniform(10, 80),
        rng.uniform(-1.5, 1.5),
        rng.choice([0.5, rng.uniform(0.3, 4.0)]),
        rng.uniform(0.0, 0.5),
    ])


@pytest.fixture(scope="session")
def bundled():
    from geoprofile.cli import bundled_dataset_path

    return read_csv(bundled_dataset_path())


@pytest.fixture(scope="session")
def bundled_fit(bundled):
    from geoprofile.mle import fit_mle

    return fit_mle(bundled)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
