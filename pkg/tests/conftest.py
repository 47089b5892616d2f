import warnings

import numpy as np
import pytest

from tolerant_kd.data import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_data():
    """Small 4-class hierarchy (2 superclasses x 2 fine classes)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = SynthSpec(superclasses=2, fine_per_super=2, dim=6, n_train=20, n_test=10,
                         sigma_super=4.0, sigma_fine=2.0, sigma_noise=0.5, seed=3)
    return generate(spec)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
