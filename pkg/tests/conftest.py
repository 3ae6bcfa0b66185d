import os

import numpy as np
import pytest
from hypothesis import settings

from dataio import load_robot, synth_demo
from graphnet import init_weights

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ROBOTS = os.path.join(ROOT, "robots")

settings.register_profile("seeded", derandomize=True, max_examples=25, deadline=None)
settings.load_profile("seeded")


@pytest.fixture(scope="session")
def arm7():
    return load_robot(os.path.join(ROBOTS, "arm7x2_hand.robot"))


@pytest.fixture(scope="session")
def arm5():
    return load_robot(os.path.join(ROBOTS, "arm5x2.robot"))


@pytest.fixture(scope="session")
def short_demo():
    return synth_demo(3, 8)


@pytest.fixture(scope="session")
def small_nets(arm5):
    return init_weights(0, arm5, d_z=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
