import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from detailnet.network import NetworkConfig, build_network

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_net():
    return build_network(NetworkConfig.from_preset("toy"), seed=0)


@pytest.fixture(scope="session")
def toy_net64():
    return build_network(NetworkConfig.from_preset("toy"), seed=0, dtype=np.float64)


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
