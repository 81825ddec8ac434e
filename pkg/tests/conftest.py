import functools

import numpy as np
import pytest

from dobstab.cli import execute
from dobstab.dynamics import LinkParams, ManipulatorModel, table_i_model
from dobstab.scenario import build_scenario, read_scenario


@functools.lru_cache(maxsize=None)
def preset_run(name: str):
    scn = build_scenario(read_scenario(name), name)
    return scn, execute(scn)


@pytest.fixture
def table_i():
    return table_i_model(geared=True)


@pytest.fixture
def sim_arm():
    return ManipulatorModel(
        (LinkParams(0.45, 6.0, 0.225, 0.10125), LinkParams(0.40, 4.0, 0.2, 0.0533)),
        gravity_accel=9.81, viscous_friction=(0.5, 0.3), armature=(2.5, 1.2))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
