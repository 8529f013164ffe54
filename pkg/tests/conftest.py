import numpy as np
import pytest

from tools.dataset import quantized_body
from tools.synthbody import chain_body


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def body2d():
    return quantized_body(chain_body(dim=2, bone_count=3))


@pytest.fixture
def body3d():
    return quantized_body(chain_body(dim=3, bone_count=3))


@pytest.fixture
def rigid2d():
    return quantized_body(chain_body(dim=2, bone_count=3, bulge=0.0))
