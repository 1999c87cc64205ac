import numpy as np
import pytest

from domain.config import resolve_config
from services import model_service


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return resolve_config("tiny", overrides={"mode": "forward", "seed": 3})


@pytest.fixture
def tiny_inverse_config():
    return resolve_config("tiny", overrides={"mode": "inverse", "seed": 3, "lam": 0.5})


@pytest.fixture
def toy_batch():
    return model_service.toy_batch(obs_dim=2, action_dim=1, length=5, episodes=3, seed=11)


@pytest.fixture
def forward_model(tiny_config):
    return model_service.build_model(tiny_config, obs_dim=2, action_dim=1)


@pytest.fixture
def inverse_model(tiny_inverse_config):
    return model_service.build_model(tiny_inverse_config, obs_dim=2, action_dim=1)
