import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from lamreid import network  # noqa: E402
from lamreid.sampler import generate_synthetic  # noqa: E402

settings.register_profile("lamreid", max_examples=60, deadline=None)
settings.load_profile("lamreid")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return network.NetConfig.reduced()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return generate_synthetic(6, 2, seed=3, test_ids=4, image_shape=tiny_config.input_shape)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
