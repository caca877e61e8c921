import numpy as np
import pytest

from src.blocks import attention_scale, linear_attention
from src.errors import ConfigError
from src.model import BlockSpec, ModelSpec, build_model, format_stages, parse_stages
from src.tensor import Tensor, cross_entropy
from tests.conftest import tiny_spec


def test_parse_stages_inserts_downsample_on_width_change():
    stages = parse_stages('conv:8:2,transformer:16:1', heads=2)
    assert [b.kind for b in stages[0]] == ['conv_block', 'conv_block']
    assert [b.kind for b in stages[1]] == ['downsample', 'transformer_block']
    assert format_stages(stages) == 'conv:8:2,transformer:16:1'


def test_same_width_stays_in_one_stage():
    stages = parse_stages('conv:8:1,transformer:8:1', heads=2)
    assert len(stages) == 1
    assert [b.kind for b in stages[0]] == ['conv_block', 'transformer_block']


@pytest.mark.parametrize('text', ['conv:8', 'conv:x:1', 'mlp:8:1', 'conv:8:0'])
def test_parse_stages_rejects(text):
    with pytest.raises(ConfigError):
        parse_stages(text)


def test_block_spec_validation():
    with pytest.raises(ConfigError):
        BlockSpec('transformer_block', 10, heads=3)
    with pytest.raises(ConfigError):
        BlockSpec('conv_block', 8, kernel=4)
    with pytest.raises(ConfigError):
        BlockSpec('pool', 8)


def test_stage_after_first_must_downsample():
    stages = (parse_stages('conv:8:1')[0], (BlockSpec('conv_block', 8),))
    with pytest.raises(ConfigError):
        ModelSpec(stages=stages, input_shape=(1, 16, 16))


def test_resolutions_shrink_at_downsamples(spec):
    assert spec.resolutions() == [(8, 8), (8, 8), (4, 4)]


def test_input_too_small_to_downsample():
    with pytest.raises(ConfigError):
        ModelSpec(stages=parse_stages('conv:4:1,conv:8:1'), input_shape=(1, 1, 1))


def test_forward_shapes(model, images):
    x = Tensor(images)
    assert model.membrane(x).shape == (6, 16, 4, 4)
    assert model(x).shape == (6, 3)


def test_spiking_outputs_are_integer_counts(model, images):
    with model.record() as taps:
        model(Tensor(images))
    assert set(taps) == set(model.spiking_layers())
    for name, outs in taps.items():
        assert len(outs) == 1
        s = outs[0]
        assert s.min() >= 0 and s.max() <= 4, name
        np.testing.assert_array_equal(s, np.round(s))
    for sn in model.spiking_layers().values():
        assert sn.tap is None


def test_stem_has_no_spiking_neuron(model):
    assert model.stem.sn is None
    assert model.stem.conv.in_scale == 1.0
    assert not any(name.startswith('stem') for name in model.spiking_layers())


def test_wrong_input_shape(model):
    with pytest.raises(ConfigError):
        model(Tensor(np.zeros((2, 1, 8, 8), dtype=np.float32)))


def test_zero_residual_branches_make_blocks_identities(model, images):
    model.zero_residual_branches()
    x = Tensor(images)
    stem = model.stem(x).data
    u = model.blocks[0](Tensor(stem)).data
    np.testing.assert_allclose(u, stem, atol=1e-6)


def test_build_is_deterministic_in_seed():
    a = build_model(tiny_spec(seed=3)).named_parameters()
    b = build_model(tiny_spec(seed=3)).named_parameters()
    c = build_model(tiny_spec(seed=4)).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not all(np.array_equal(a[k].data, c[k].data) for k in a)


def test_loss_reaches_stem_and_head(images):
    model = build_model(tiny_spec()).train()
    loss = cross_entropy(model(Tensor(images)), np.array([0, 1, 2, 0, 1, 2]))
    loss.backward()
    params = model.named_parameters()
    assert np.isfinite(float(loss.data))
    for name in ('stem.conv.weight', 'head.weight', 'head.bias'):
        assert params[name].grad is not None and np.abs(params[name].grad).sum() > 0, name


def test_gradient_crosses_windows(rng):
    model = build_model(tiny_spec(t_steps=2)).train()
    x1 = Tensor(rng.uniform(0, 1, (4, 1, 16, 16)).astype(np.float32), requires_grad=True)
    x2 = Tensor(rng.uniform(0, 1, (4, 1, 16, 16)).astype(np.float32))
    model(x1)
    cross_entropy(model(x2), np.array([0, 1, 2, 0])).backward()
    assert x1.grad is not None and np.abs(x1.grad).sum() > 0
    model.reset_state()
    assert all(sn.state is None for sn in model.spiking_layers().values())


def test_attention_matches_softmax_free_reference(rng):
    n, c, h, w, heads = 2, 4, 3, 3, 2
    q, k, v = (rng.integers(0, 3, (n, c, h, w)).astype(np.float64) for _ in range(3))
    a = linear_attention(q, k, v, heads)
    dh = c // heads
    for head in range(heads):
        qh = q[:, head * dh:(head + 1) * dh].reshape(n, dh, -1).transpose(0, 2, 1)
        kh = k[:, head * dh:(head + 1) * dh].reshape(n, dh, -1)
        vh = v[:, head * dh:(head + 1) * dh].reshape(n, dh, -1).transpose(0, 2, 1)
        ref = (qh @ (kh @ vh)).transpose(0, 2, 1).reshape(n, dh, h, w)
        np.testing.assert_allclose(a[:, head * dh:(head + 1) * dh], ref)


def test_attention_scale_folds_rates():
    assert attention_scale(16, 2, 4) == pytest.approx(1 / np.sqrt(8) / 4 ** 3)
