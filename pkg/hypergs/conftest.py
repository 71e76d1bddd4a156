# conftest.py
import sys
from os.path import abspath, dirname

import numpy as np
import pytest

from hypergs.dto import CameraConfig
from hypergs.splat import Camera, camera_from_config

root_dir = dirname(abspath(__file__))
sys.path.append(root_dir)


@pytest.fixture(scope='session', autouse=True)
def test_configure_logging() -> None:
    from hypergs.logger import configure_logging

    configure_logging(debug_loggers=['hypergs'])


@pytest.fixture
def small_cam() -> Camera:
    return camera_from_config(CameraConfig(width=8, height=8))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
