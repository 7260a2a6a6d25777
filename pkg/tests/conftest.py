import numpy as np
import pytest

from delayrate.datasets import bond_calibration_params, load_yield_curve
from delayrate.shortrate import InitialCurve, ModelParams


@pytest.fixture(scope="session")
def table1_models():
    return {t: bond_calibration_params(t) for t in (1.0, 2.0, 3.0, 4.0)}


@pytest.fixture(scope="session")
def model_tau1(table1_models):
    return table1_models[1.0]


@pytest.fixture(scope="session")
def flat_phi():
    return InitialCurve.flat(0.0555, 1.0)


@pytest.fixture(scope="session")
def yield_curve():
    return load_yield_curve()


@pytest.fixture
def vasicek():
    """kappa = 1, theta = 0.05, sigma = 0.004 with a dummy delay."""
    return ModelParams.from_values(0.05, -1.0, [0.0], [1.0], 0.004)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
