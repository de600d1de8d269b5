from __future__ import annotations

import numpy as np
import pytest

from dgnfit.assets import build_toy_rig, load_hand, load_hand_embedding
from dgnfit.kinematics import PoseParams


@pytest.fixture(scope="session")
def hand():
    return load_hand()


@pytest.fixture(scope="session")
def hand_emb():
    return load_hand_embedding()


@pytest.fixture(scope="session")
def toy():
    return build_toy_rig()


def random_pose(mesh, seed, spread=0.15):
    rng = np.random.default_rng(seed)
    return PoseParams(1.0, np.zeros(3), -mesh.vertices.mean(axis=0),
                      rng.uniform(-spread, spread, size=(mesh.n_joints - 1, 3)))


_SCENES = {}


def hand_scene(seed=0, n_views=1, noise=0.0, holes=0.0):
    """Cached synthetic scene of the packaged hand at a random pose."""
    from dgnfit.synth import default_rig, make_scene

    key = (seed, n_views, noise, holes)
    if key not in _SCENES:
        mesh = load_hand()
        _SCENES[key] = make_scene(mesh, load_hand_embedding(), random_pose(mesh, seed), default_rig(n_views),
                                  noise=noise, holes=holes, seed=seed)
    return _SCENES[key]
