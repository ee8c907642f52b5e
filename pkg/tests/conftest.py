from types import SimpleNamespace

import numpy as np
import pytest

import verdicts
from u2o import env as envmod, harness


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid5_full():
    """Full-coverage 5x5 data collected from uniform starts."""
    spec = envmod.gridworld(5, start=None)
    ds = envmod.collect_offline_dataset(spec, "uniform_random", 20_000, np.random.default_rng(0))
    ds.spec = envmod.gridworld(5)
    return ds


@pytest.fixture(scope="session")
def pointmass_data():
    spec = envmod.pointmass()
    return envmod.collect_offline_dataset(spec, "epsilon_random_walk", 20_000, np.random.default_rng(0))


POINTMASS_STANDARD = """
method = [u2o, zero_shot]
env = pointmass
task = [reach_tl, reach_tr, reach_bl, reach_br]
seed = [0, 1, 2]
"""


@pytest.fixture(scope="session")
def pointmass_standard(tmp_path_factory):
    """Default-scale pointmass setup with a pretraining cache shared by the session."""
    cfg = harness.parse_config(POINTMASS_STANDARD)
    return SimpleNamespace(cfg=cfg, ds=harness.build_dataset(cfg),
                           cache=harness.PretrainCache(tmp_path_factory.mktemp("pointmass-cache")))


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
