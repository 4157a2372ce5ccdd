"""
共通フィクスチャ
"""

import numpy as np
import pytest

from backbone import BackboneConfig
from tensor_core import precision


@pytest.fixture
def float64():
    """float64 精度で実行"""
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone_config():
    return BackboneConfig(input_shape=(3, 8, 8), channels=(4, 6), strides=(1, 2))
