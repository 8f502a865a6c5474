"""
Shared fixtures for the rawtobit test suite
Tiny model configurations and synthetic RAW/sRGB pairs keep every test on CPU
"""

import numpy as np
import pytest
import torch

from data_pipeline import synthesize_pair
from networks import ModelConfig, SystemName


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: longer training runs; deselect with -m \"not slow\"")


TINY = dict(
    width=16,
    latent_channels=8,
    teacher_k=8,
    hyper_channels=8,
    rcag_blocks=1,
    reduction=4,
    baseline_channels=8,
    isp_width=8,
    isp_groups=1,
)


@pytest.fixture(autouse=True)
def seeded():
    """Every test starts from the same torch and numpy state"""
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Factory for small ModelConfigs of any system"""
    def make(system=SystemName.RBN, **overrides):
        return ModelConfig(system=system, **{**TINY, **overrides})
    return make


@pytest.fixture(scope="session")
def synthetic_pairs():
    """Three 128x128 synthetic captures as (RawImage, SrgbImage) pairs"""
    rng = np.random.default_rng(7)
    return [synthesize_pair(rng, 128, 128, f"pair_{i}").to_images() for i in range(3)]


@pytest.fixture(scope="session")
def synthetic_pair():
    return synthesize_pair(np.random.default_rng(3), 128, 128, "single")
