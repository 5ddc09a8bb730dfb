import os

import numpy as np
import pytest
import torch

from errnet.backbone import WEIGHTS_ENV, get_backbone


def backbone_spec() -> str:
    """Pretrained weights when ERRNET_VGG19_WEIGHTS points at a file, else the seeded surrogate."""
    path = os.environ.get(WEIGHTS_ENV)
    return path if path and os.path.isfile(path) else "random"


@pytest.fixture(scope="session")
def backbone():
    return get_backbone(backbone_spec())


@pytest.fixture(scope="session")
def backbone64():
    return get_backbone(backbone_spec(), dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
