import numpy as np
import pytest


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_dirs(n, seed=0):
    return unit(np.random.default_rng(seed).normal(size=(n, 3)))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
