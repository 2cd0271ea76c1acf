import os
import sys

import pytest

ROOT = os.path.dirname(os.path.abspath(__file__))
for folder in ('Signal Source Codes', 'Damage Detection Algorithm'):
    path = os.path.join(ROOT, folder)
    if path not in sys.path:
        sys.path.insert(0, path)

from signal_core import PlateModel, make_time_grid  # noqa: E402
from synth_oracle import make_pulse  # noqa: E402

# coarse grid for fast tests: 35 us record, 250 plate cells
SMALL_DT = 0.01
SMALL_N = 3500
SMALL_DZ = 0.004


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help="also run the full-size experiments marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason="slow experiment, use --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session')
def small_grid():
    return make_time_grid(SMALL_DT, SMALL_N)


@pytest.fixture(scope='session')
def small_plate():
    return PlateModel(dz=SMALL_DZ)


@pytest.fixture(scope='session')
def small_pulse(small_grid):
    return make_pulse(grid=small_grid, t_ex=11.8)
