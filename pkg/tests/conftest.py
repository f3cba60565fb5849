import numpy as np
import pytest

from censelect.survival import Dataset

ACCEPTANCE_LINES = []


def random_dataset(rng, n, p, censor=0.3, effect=0.5, ties=False):
    """Small dataset with exponential times; continuous unless ``ties``."""
    x = rng.standard_normal((n, p))
    a = rng.integers(0, 2, n)
    rate = np.exp(effect * x[:, :1].sum(axis=1) if p else np.zeros(n))
    t = rng.exponential(1 / rate)
    if ties:
        t = np.ceil(t * 4) / 4
    status = (rng.random(n) > censor).astype(int)
    if status.sum() == 0:
        status[0] = 1
    return Dataset(t, status, a, x)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
