import os
import pytest

import torch

from vprtk.config import set_hydra_configuration, Configuration
from vprtk.datasets import MANIFEST_NAME, generate_synth_world
from vprtk.models import PlaceRecognitionModel, instantiate_model


@pytest.fixture
def test_config_name():
    """Fixture for the test configuration name."""
    return "tests"


@pytest.fixture
def test_config_dir():
    """Fixture for the test configuration directory."""
    return os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.fixture
def test_cfg(test_config_name: str, test_config_dir: os.PathLike):
    """Fixture for the vprtk configuration."""
    return set_hydra_configuration(
        config_name=test_config_name,
        init_method_kwargs={"config_dir": test_config_dir},
        ConfigurationInstance=Configuration,
    )


@pytest.fixture
def tiny_model(test_cfg: Configuration) -> PlaceRecognitionModel:
    """A seeded 64-bit model of the `tiny-model` preset."""
    return instantiate_model(test_cfg.models, dtype=torch.float64, seed=0)


@pytest.fixture
def synth_world(test_cfg: Configuration, tmp_path) -> str:
    """Renders the `tiny-world` preset and returns the manifest path."""
    world_dir = tmp_path / "world"
    generate_synth_world(test_cfg.datasets, world_dir)
    return str(world_dir / MANIFEST_NAME)
