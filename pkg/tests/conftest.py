import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from himm.model import HimmParams, ModelShape, random_params  # noqa: E402

# lines printed at the end of the run by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_instance(seed, L=None, T=None, n_low=None):
    """Random params plus observations drawn near the emission means."""
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 4)) if L is None else L
    T = int(rng.integers(1, 7)) if T is None else T
    n_low = int(rng.integers(0, L)) if n_low is None else n_low
    shape = ModelShape(L, base=1, L0=tuple(range(1, 1 + n_low)))
    params = random_params(shape, rng, mu_range=(0.0, 3.0), sigma2_range=(0.3, 1.5))
    U = rng.integers(0, L, T)
    Y = rng.normal(1.5, 1.5, T)
    return params, U, Y


def noiseless_params(L=4, n_low=1, stay=0.7):
    """D identity, well-separated means, tiny variances; fully observable states."""
    shape = ModelShape(L, base=1, L0=tuple(range(1, 1 + n_low)))
    A = np.full((L, L), (1 - stay) / (L - 1)) + np.eye(L) * (stay - (1 - stay) / (L - 1))
    pi_C = np.tile([0.5, 0.5], (L, 1))
    pi_C[:n_low] = [1.0, 0.0]
    B = np.tile([[0.6, 0.4], [0.3, 0.7]], (L, 1, 1))
    B[:n_low] = [[1.0, 0.0], [1.0, 0.0]]
    mu = np.vstack([np.zeros(L), 10.0 * (1 + np.arange(L))])
    sigma2 = np.full((2, L), 1e-4)
    return HimmParams(shape, np.full(L, 1.0 / L), pi_C, A, B, np.eye(L), mu, sigma2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
