import numpy as np
import pytest
from hypothesis import settings

from medusa.attention import GlobalConfig
from medusa.backbone import BackboneConfig
from medusa.model import build_variant

settings.register_profile("medusa", deadline=None, max_examples=40)
settings.load_profile("medusa")

GRAD_SEEDS = range(10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_bundle(kind="medusa", seed=0, dtype=np.float64, size=8, channels=(3, 4), global_depth=2, base=2):
    """Smallest interesting model: 8x8 input, two stages."""
    return build_variant(kind, BackboneConfig(channels, 1, (1, size, size), 2), GlobalConfig(global_depth, base),
                         seed=seed, se_reduction=1, dtype=dtype)
