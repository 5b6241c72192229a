import numpy as np
import pytest

from bevcontrast.geometry import RigidTransform, rotation_x, rotation_y, rotation_z


def random_rotation(rng):
    return rotation_z(rng.uniform(-np.pi, np.pi)) @ rotation_y(rng.uniform(-0.5, 0.5)) @ rotation_x(rng.uniform(-0.5, 0.5))


def random_pose(rng, scale=10.0):
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
