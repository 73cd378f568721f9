import numpy as np
import pytest
import torch

from cpga.datasets import ShiftConfig, make_gaussian_domains
from cpga.training import TrainConfig, pretrain_source


@pytest.fixture(scope="session")
def tiny_shift():
    """Small, fast, and easily separable; keeps unit tests under a second."""
    return ShiftConfig(num_classes=4, input_dim=8, samples_per_class=30,
                       rotation_angle=0.3, noise_std=0.4,
                       class_separation=3.0, seed=0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TrainConfig(seed=0, pretrain_epochs=30, stage1_epochs=60,
                       stage2_epochs=4, feature_dim=16,
                       extractor_hidden=(16,), noise_dim=12,
                       generator_hidden=32, projector_hidden=(16,),
                       contrast_dim=8)


@pytest.fixture(scope="session")
def tiny_domains(tiny_shift):
    return make_gaussian_domains(tiny_shift)


@pytest.fixture(scope="session")
def tiny_source_model(tiny_domains, tiny_cfg):
    source, _ = tiny_domains
    return pretrain_source(source, tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def scramble_global_rng(value):
    """Perturb the global streams; nothing downstream may depend on them."""
    torch.manual_seed(value)
    np.random.seed(value)
