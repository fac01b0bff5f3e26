import numpy as np
import pytest
import torch

from cofinetune.model import CofinetuneModel, HeadSpec, ModelConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(input_shape=(4, 16, 16, 3), tubelet=(2, 4, 4), hidden_dim=16, num_layers=2,
                       num_attention_heads=2, mlp_dim=32, stochastic_depth_rate=0.0, roi_grid=(2, 2),
                       heads=(HeadSpec("cls", "classification", 5), HeadSpec("det", "detection", 4)))


@pytest.fixture
def tiny_model(tiny_config):
    return CofinetuneModel(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_SYNTH = dict(clip_shape=(4, 16, 16, 3), num_classes=4, num_palettes=2, num_patterns=2, num_directions=1,
                 detection_train_clips=16, detection_val_clips=8, classification=({"name": "cls", "size": 24},))


@pytest.fixture(scope="session")
def toy_suite():
    from cofinetune.synthetic import SyntheticConfig, generate_synthetic_suite
    return generate_synthetic_suite(0, SyntheticConfig(**TOY_SYNTH))


def toy_model_for(datasets, seed=0, sd=0.2):
    heads = tuple(HeadSpec(d.spec.name, d.spec.task, d.spec.num_classes) for d in datasets)
    cfg = ModelConfig(input_shape=(4, 16, 16, 3), tubelet=(2, 8, 8), hidden_dim=8, num_layers=1,
                      num_attention_heads=2, mlp_dim=16, stochastic_depth_rate=sd, roi_grid=(2, 2), heads=heads)
    return CofinetuneModel(cfg, seed=seed)
