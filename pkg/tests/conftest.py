import pytest
import torch
from hypothesis import HealthCheck, settings

from gatsbi.config import tiny_config

settings.register_profile(
    "gatsbi", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("gatsbi")


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
    yield
