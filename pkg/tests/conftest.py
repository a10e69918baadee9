import numpy as np
import pytest

from fedbench.data import gen_synthetic, SyntheticSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_class_fixture():
    """Small, linearly separable 2-class dataset used by the federation tests."""
    spec = SyntheticSpec(num_classes=2, samples_per_class=60, image_shape=(1, 4, 4),
                         class_signal=1.0, noise_level=0.3)
    return gen_synthetic(spec, seed=7)


def pytest_terminal_summary(terminalreporter):
    from fedhelpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
