import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

from vqelab.models import LMConfig, ModelBundle, VisionConfig  # noqa: E402

TINY_VISION = VisionConfig(image_height=8, image_width=12, patch_size=4, embed_dim=8, layers=1, heads=2, mlp_ratio=2)
TINY_LM = LMConfig(vocab_size=20, embed_dim=8, layers=1, heads=2, context_len=32, mlp_ratio=2)


@pytest.fixture
def tiny_bundle():
    return ModelBundle(TINY_VISION, TINY_LM, seed=3, dtype=np.float64)


@pytest.fixture
def tiny_image():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, size=(TINY_VISION.image_height, TINY_VISION.image_width))
