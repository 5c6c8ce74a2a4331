import numpy as np
import pytest

from dvrec import synthetic
from dvrec.data import from_pairs

# acceptance results collected by tests/test_acceptance.py
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])


@pytest.fixture(scope="session")
def planted():
    return synthetic.planted_noise(seed=0)


@pytest.fixture
def small_dataset():
    """30 users x 40 items, every user with 10 to 19 positives."""
    rng = np.random.default_rng(123)
    pairs = []
    for u in range(30):
        for i in rng.choice(40, size=10 + u % 10, replace=False):
            pairs.append((u, int(i)))
    return from_pairs(pairs, n_users=30, n_items=40, seed=1)
