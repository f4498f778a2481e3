import numpy as np
import pytest

from leakybilliards import geometry, measures
from leakybilliards.streams import stream


@pytest.fixture(scope="session")
def table():
    return geometry.default_table()


@pytest.fixture(scope="session")
def nu_states(table):
    """10^4 stationary draws shared by the closed-map tests."""
    sid, r, phi = measures.sample_nu(table, 10_000, stream(424242, "test-nu"))
    return sid, r, phi


def rng(*tags):
    return stream(987654321, *tags)


def pytest_addoption(parser):
    parser.addoption(
        "--skip-acceptance", action="store_true", default=False,
        help="skip the long acceptance criteria",
    )


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-acceptance"):
        return
    skip = pytest.mark.skip(reason="--skip-acceptance")
    for item in items:
        if "acceptance" in item.nodeid:
            item.add_marker(skip)
