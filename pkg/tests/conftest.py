import numpy as np
import pytest

from partforest.model import TrainConfig, train_part_model
from partforest.synth import RenderStyle, synth_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def train_scenes():
    return synth_sequence(40, "walk", seed=0)


@pytest.fixture(scope="session")
def test_scenes():
    return synth_sequence(4, "walk", seed=1, phase_offset=0.01)


@pytest.fixture(scope="session")
def small_model(train_scenes):
    return train_part_model(train_scenes, TrainConfig(n_negatives=100))


@pytest.fixture(scope="session")
def style():
    return RenderStyle()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
