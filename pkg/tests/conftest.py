import numpy as np
import pytest

from archrobust.cellspace import Cell, OpKind, decode_arch_string
from archrobust.tinynet import NetworkConfig, build_network, synth_dataset, train

# Smallest config that still has two stages and 3x3 convolutions everywhere.
MICRO = NetworkConfig(image_size=4, stem_width=4, num_classes=3)
# Attack and end-to-end fixtures.
SMALL = NetworkConfig(image_size=8, stem_width=4, num_classes=4)

MIXED = "|nor_conv_3x3~0|+|none~0|avg_pool_3x3~1|+|skip_connect~0|nor_conv_1x1~1|nor_conv_3x3~2|"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running fixture runs")


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data():
    return synth_dataset(SMALL, 512, 64, seed=3)


@pytest.fixture(scope="session")
def trained_small(small_data):
    tr, _ = small_data
    net = build_network(decode_arch_string(MIXED), SMALL, seed=0)
    return train(net, tr, epochs=8, lr=0.05, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def all_conv3():
    return Cell.uniform(OpKind.NOR_CONV_3X3)
