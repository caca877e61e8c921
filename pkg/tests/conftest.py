import matplotlib

matplotlib.use('Agg')

import numpy as np
import pytest

from src.model import ModelSpec, build_model, parse_stages
from src.neuron import NeuronConfig


def tiny_spec(d_cap: int = 4, t_steps: int = 1, seed: int = 0, **neuron) -> ModelSpec:
    """Stem to 8x8, a conv stage at 8 channels, a transformer stage at 16 channels on 4x4."""
    cfg = NeuronConfig(d_cap=d_cap, t_steps=t_steps, **neuron)
    stages = parse_stages('conv:8:1,transformer:16:1', heads=2)
    return ModelSpec(stages=stages, input_shape=(1, 16, 16), num_classes=3, neuron=cfg, seed=seed)


def randomize_bn(model, seed: int = 0) -> None:
    """Move BN statistics away from identity so folding is actually exercised."""
    rng = np.random.default_rng(seed)
    for name, buf in model.named_buffers().items():
        if name.endswith('running_mean'):
            buf[...] = rng.normal(0.0, 0.1, buf.shape)
        elif name.endswith('running_var'):
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
    for name, p in model.named_parameters().items():
        if name.endswith('bn_gamma'):
            p.data[...] = rng.uniform(0.8, 1.6, p.shape)
        elif name.endswith('bn_beta'):
            p.data[...] = rng.normal(0.3, 0.2, p.shape)


def excite_attention(model, factor: float = 200.0) -> None:
    """Lower every attention-output threshold so the attention path carries spikes at init."""
    for name, module in model.named_modules():
        if name.endswith('sn_attn'):
            module.v_th /= factor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def model(spec):
    m = build_model(spec).eval()
    randomize_bn(m)
    return m


@pytest.fixture
def images(rng):
    return rng.uniform(0.0, 1.0, (6, 1, 16, 16)).astype(np.float32)


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / 'out'
    path.mkdir()
    return path
