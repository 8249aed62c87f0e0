import numpy as np
import pytest

from cellspan.dataset import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_synth():
    """30 noisy synthetic cells and their truth sidecar."""
    return generate_synthetic(SyntheticSpec(n_cells=30, rng_seed=3))


@pytest.fixture(scope="session")
def noiseless_synth():
    return generate_synthetic(SyntheticSpec(n_cells=20, noise_sd=0.0, rng_seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
