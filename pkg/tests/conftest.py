import numpy as np
import pytest

from mrpgo.geometry import Pose3, Rot3, so3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, rot_scale=1.0, trans_scale=1.0):
    phi = rng.normal(0, rot_scale, 3)
    # keep angles safely below pi
    norm = np.linalg.norm(phi)
    if norm > np.pi - 0.2:
        phi *= (np.pi - 0.2) / norm
    return Pose3(Rot3(so3_exp(phi)), rng.normal(0, trans_scale, 3))


def rz(theta):
    return Rot3.from_rotvec([0.0, 0.0, theta])
