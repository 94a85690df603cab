import dataclasses
import warnings

import pytest

from evitrack.exact_filter import generate_dataset
from evitrack.world_model import WorldModelParams

SLOW = dataclasses.replace(WorldModelParams(), V0=0.002)


@pytest.fixture(scope="session")
def params():
    return WorldModelParams()


@pytest.fixture(scope="session")
def slow_params():
    """Weaker potential so that DD times land in the 30..170 bins."""
    return SLOW


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SLOW, per_bin=2, root_seed=0)


@pytest.fixture(autouse=True)
def _no_stray_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
