import numpy as np
import pytest

from ovrosr.data import gen_blobs, gen_supplementary_2d
from ovrosr.netcore import TrainConfig
from ovrosr.openset import calibrate, train_bank

ACCEPTANCE_LINES = []

SUPP_CFG = TrainConfig(learning_rate=0.1, epochs=3000, batch_size=32, momentum=0.9,
                       seed=0, target_loss=1e-3)


@pytest.fixture(scope="session")
def supp_data():
    return gen_supplementary_2d(seed=0, n_per_class=100)


@pytest.fixture(scope="session")
def supp_bank(supp_data):
    return train_bank(supp_data, [5], SUPP_CFG, with_baseline="single_sigmoid")


@pytest.fixture(scope="session")
def supp_evt(supp_bank, supp_data):
    return calibrate(supp_bank, supp_data, alpha=0.2)


@pytest.fixture(scope="session")
def blobs4():
    return gen_blobs(seed=2, classes=4, dim=2, separation=6.0, n_per_class=50)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
