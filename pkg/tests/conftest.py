import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from caga import tensor as T

settings.register_profile("caga", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("caga")


@pytest.fixture(autouse=True)
def _f64_default():
    previous = T.default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, low=None, high=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, shape)
    return T.Tensor(data, requires_grad=True, dtype=np.float64)


def weighted_sum(build, inputs, seed=0):
    """Scalar sum(w * build(inputs)) with a fixed random weight w."""
    with T.no_grad():
        shape = build(inputs).shape
    w = T.Tensor(np.random.default_rng(seed).normal(size=shape), dtype=np.float64)
    return lambda: T.sum_(T.mul(build(inputs), w))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
