import os
import sys

import numpy as np
import pytest

# Make `src` importable when pytest is run from anywhere
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Small 3D model (stride 4, 16x16) that keeps composed-model tests fast."""
    from src.model.config import BlockSpec, ModelConfig
    return ModelConfig(height=16, width=16, backbone=(BlockSpec(4, pool=True), BlockSpec(6, pool=True)),
                       temporal_width=6, head_width=8, num_anchors=2, priors=((1.0, 1.0), (2.0, 1.5)))
