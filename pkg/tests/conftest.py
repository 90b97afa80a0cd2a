import numpy as np
import pytest

from ppcate.data import Dataset


def make_dataset(n=200, d=2, seed=0, effect=0.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    e = 1.0 / (1.0 + np.exp(-(X @ np.linspace(-1, 1, d))))
    Z = (rng.uniform(size=n) < e).astype(float)
    Z[:2] = (0.0, 1.0)
    Y = X.sum(axis=1) + effect * Z + rng.standard_normal(n)
    return Dataset(X, Z, Y, np.full(n, effect))


@pytest.fixture
def small_ds():
    return make_dataset()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
