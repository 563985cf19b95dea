import numpy as np
import pytest

from gmmda.data import ShiftSpec, generate_pair
from gmmda.trainer import ExperimentConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ExperimentConfig(seed=3, n_per_domain=160, epochs=2, batch_size=32)


@pytest.fixture
def small_pair(small_cfg):
    return generate_pair(small_cfg.seed, small_cfg.n_per_domain, small_cfg.d, small_cfg.C,
                         small_cfg.shift)


@pytest.fixture
def identity_shift():
    return ShiftSpec.identity(0.05)
