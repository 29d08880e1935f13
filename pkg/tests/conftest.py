import numpy as np
import pytest

from objectness import data
from objectness.bbox import BBoxGrid
from objectness.model import NetworkConfig, bbox_head
from objectness.nn import LayerSpec


def tiny_trunk(feature_dim=16):
    return (
        LayerSpec("conv", out_channels=4, kernel_size=3, stride=1, pad=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("dense", out_features=feature_dim),
        LayerSpec("relu"),
    )


@pytest.fixture
def small_grid():
    return BBoxGrid(nx=4, ny=4, ns=2, na=2)


@pytest.fixture
def tiny_config(small_grid):
    """A fast network on 3x16x16 inputs."""
    return NetworkConfig(input_dims=(3, 16, 16), trunk=tiny_trunk(), feature_dim=16, head=bbox_head(small_grid))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 10-class, 16x16 shapes dataset: ``(manifest path, records, config)``."""
    cfg = data.SynthConfig(num_classes=10, train_images=60, val_images=40, image_size=16,
                           scale_range=(0.3, 0.6), seed=3)
    manifest = data.generate(cfg, tmp_path_factory.mktemp("shapes"))
    return manifest, data.load_manifest(manifest), cfg


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
