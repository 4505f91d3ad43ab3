import numpy as np
import pytest

from lobliq.estimation import EventLog, segment_races
from lobliq.kernel import GridSpec, build_tables
from lobliq.model import ModelParams
from lobliq.presets import stylised_volume_dist, yhoo_params
from lobliq.simulator import generate_event_stream
from lobliq.solver import value_iteration

TOY_GRID = GridSpec(horizon=2.0, n_lambda=21)


@pytest.fixture(scope="session")
def yhoo():
    return yhoo_params(0)


@pytest.fixture(scope="session")
def yhoo_tables(yhoo):
    return build_tables(yhoo, 2, 2, GridSpec())


@pytest.fixture(scope="session")
def yhoo_solution(yhoo, yhoo_tables):
    return value_iteration(yhoo, yhoo_tables, 2, T=10.0, tol=1e-3)


@pytest.fixture(scope="session")
def yhoo_solution_free(yhoo, yhoo_tables):
    """Same problem without the monotone projection."""
    return value_iteration(yhoo, yhoo_tables, 2, T=10.0, tol=1e-3, monotone=False)


@pytest.fixture(scope="session")
def toy():
    return yhoo_params(0, N=2)


@pytest.fixture(scope="session")
def toy_tables(toy):
    return build_tables(toy, 1, 1, TOY_GRID)


@pytest.fixture(scope="session")
def toy3():
    return yhoo_params(0, N=3)


@pytest.fixture(scope="session")
def toy3_tables(toy3):
    return build_tables(toy3, 2, 2, TOY_GRID)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SYNTHETIC_RATES = dict(
    mu=np.array([[0.8, 0.9], [0.7, 1.0]]),
    kappa=np.array([[1.2, 1.5], [1.4, 1.1]]),
    theta=np.array([[0.3, 0.35], [0.25, 0.4]]),
)


@pytest.fixture(scope="session")
def synthetic_params():
    up, down = stylised_volume_dist(10, 1.5, 3.0, 2.0)
    return ModelParams(vol_dist_up=up, vol_dist_down=down, **SYNTHETIC_RATES)


@pytest.fixture(scope="session")
def synthetic_stream(synthetic_params):
    return generate_event_stream(synthetic_params, 150_000.0, 5)


@pytest.fixture(scope="session")
def synthetic_races(synthetic_stream):
    return segment_races(EventLog.from_stream(synthetic_stream))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
