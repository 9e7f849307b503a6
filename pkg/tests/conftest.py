import numpy as np
import pytest
from hypothesis import settings

from samdistill import nn, scene

settings.register_profile("ci", deadline=None, derandomize=True, max_examples=40)
settings.load_profile("ci")


TINY_ARCH = nn.Arch(
    embed_dim=8,
    n_heads=2,
    n_enc_layers=1,
    n_dec_layers=1,
    pointnet_hidden=6,
    max_points_per_token=16,
    mlp_ratio=1,
    proj_dim=5,
)


@pytest.fixture(scope="session")
def small_bundle() -> scene.SceneBundle:
    return scene.generate_scene(scene.SceneSpec(n_objects=3, seed=11))


@pytest.fixture(scope="session")
def tiny_arch() -> nn.Arch:
    return TINY_ARCH


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
