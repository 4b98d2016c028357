import numpy as np
import pytest

from voxmt.config import PROFILES
from voxmt.model import init_weights
from voxmt.synth import synth_scene


@pytest.fixture(scope="session")
def toy_scene():
    return synth_scene(7, n_points=6000)


@pytest.fixture(scope="session")
def toy_weights():
    """Random toy weights with head biases that yield a few confident boxes."""
    w = init_weights(PROFILES["toy"], 7)
    w["head.det.iou.bias"] = np.array([3.0])
    w["head.det.hm.bias"] = np.array([4.0, -6.0, -6.0])
    w["head.det.reg.bias"] = np.array([0.5, 0.5, 0.0, 1.5, 1.5, 1.5, 0.0, 1.0])
    w["stage2.mask.bias"] = np.array([4.0])
    w["stage2.box.bias"] = np.array([4.0, 0.0, 0.0, 0.0])
    return w
