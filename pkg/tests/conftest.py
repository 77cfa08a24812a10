import numpy as np
import pytest

from handfit import geometry
from handfit.depth import CameraIntrinsics


@pytest.fixture(scope="session")
def geom():
    return geometry.HandGeometry.default()


@pytest.fixture(scope="session")
def limits():
    return geometry.JointLimits.default()


@pytest.fixture(scope="session")
def cam():
    return CameraIntrinsics.default()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
