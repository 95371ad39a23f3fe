import numpy as np
import pytest

from covdeform.grid import GridDomain
from covdeform.simulation import Scenario, generate_dataset

# acceptance results, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def domain33():
    return GridDomain.square(33)


@pytest.fixture(scope="session")
def scenario():
    return Scenario()


@pytest.fixture(scope="session")
def sim(scenario):
    return generate_dataset(scenario)


@pytest.fixture(scope="session")
def noiseless_sim():
    sc = Scenario(noise_sd=0.0)
    return sc, generate_dataset(sc)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
