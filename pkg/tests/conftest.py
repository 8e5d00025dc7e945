"""
Shared fixtures: small float64 models, rule sets and VLM states
"""

import numpy as np
import pytest

from corpus_filters import load_rule_sets
from model_core import ParallelLM, get_preset
from vlm_extension import EncoderConfig, GridPolicy, VlmState


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    """2 layers, d_model 64, 4 query heads over 2 kv heads, vocab 97"""
    return get_preset("toy").replace(context_length=32)


@pytest.fixture
def toy_model(toy_config):
    return ParallelLM.init(toy_config, seed=7, dtype=np.float64)


@pytest.fixture
def desk_model():
    return ParallelLM.init(get_preset("desk-stage1"), seed=3)


@pytest.fixture(scope="session")
def rule_sets():
    return load_rule_sets()


@pytest.fixture
def vlm_state(desk_model):
    encoder = EncoderConfig(image_size=56, patch_size=14, feature_dim=32, seed=0)
    return VlmState.init(desk_model, encoder, seed=0, policy=GridPolicy(base_resolution=56))
