import pytest
import torch

from aios.template import build_template


@pytest.fixture(scope="session")
def body():
    return build_template()


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
