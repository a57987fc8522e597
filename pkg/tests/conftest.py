import sys

import numpy as np
import pytest

from mgp import model
from mgp.tensor import Tensor


@pytest.fixture(scope="session")
def gen():
    return model.load_checkpoint(model.TOY_GEN_PATH)


@pytest.fixture(scope="session")
def phi():
    return model.load_checkpoint(model.TOY_PHI_PATH)


@pytest.fixture(scope="session")
def small_gen():
    # 8x8 output, few units: keeps leaky-ReLU kinks away from finite-difference probes
    return model.make_toy_generator(3, depth=4, latent_dim=6, base_channels=6)


@pytest.fixture(scope="session")
def small_phi():
    return model.make_toy_extractor(5, width=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randn(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
