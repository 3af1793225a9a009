import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from mmsb.genmodel import Hyperparams, sample_network  # noqa: E402
from mmsb.netdata import pair_data  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_phi(rng, M, P, K):
    out = rng.dirichlet(np.ones(K), size=(M, P))
    inc = rng.dirichlet(np.ones(K), size=(M, P))
    return out, inc


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def planted4():
    """N=100, K=4, alpha=0.05, within-block 0.3, between 0.01."""
    B = np.full((4, 4), 0.01) + np.eye(4) * 0.29
    hyper = Hyperparams(4, 0.05, B, 0.0)
    nets, truth = sample_network(hyper, 100, seed=0)
    return hyper, nets, truth


@pytest.fixture(scope="session")
def small2():
    """N=20, K=2 two-block network."""
    hyper = Hyperparams(2, 0.1, [[0.6, 0.05], [0.05, 0.5]], 0.0)
    nets, truth = sample_network(hyper, 20, seed=7)
    return hyper, nets, truth, pair_data(nets)
