from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.errors import ConfigError, NonFiniteError, ShapeError
from src.experiment import pretrain_from_config
from src.mim import (SparsityMap, build_decoder, build_encoder, effective_rank, finetune_convert,
                     leakage_profile, make_mask, masked_patch_loss, max_pool2, mim_pretrain_step,
                     normalize_patches, patchify, pretrain_mim, spike_sparse_conv)
from src.optim import AdamW, AdamWHyper
from src.settings import load_config
from src.tensor import Tensor
from tests.conftest import tiny_spec

CONFIGS = Path(__file__).resolve().parent.parent / 'configs'


@given(seed=st.integers(0, 10_000), mu=st.floats(0.0, 0.95))
@settings(max_examples=40, deadline=None)
def test_mask_and_visible_are_complementary(seed, mu):
    plan = make_mask((3, 1, 16, 16), p=4, mu=mu, seed=seed)
    np.testing.assert_array_equal(plan.mask + plan.visible, np.ones_like(plan.mask))
    assert (plan.mask.reshape(3, -1).sum(axis=1) == plan.r2).all()
    assert 1 <= plan.r1 <= 16


@pytest.mark.parametrize('mu,r2', [(0.6, 10), (0.01, 1), (0.0, 0), (0.99, 15)])
def test_masked_patch_count(mu, r2):
    assert make_mask((1, 16, 16), p=4, mu=mu).r2 == r2


def test_mask_errors():
    with pytest.raises(ConfigError):
        make_mask((1, 16, 16), p=4, mu=1.0)
    with pytest.raises(ShapeError):
        make_mask((1, 15, 16), p=4)


def test_pixel_visibility_expands_patches():
    plan = make_mask((2, 1, 8, 8), p=4, mu=0.5, seed=3)
    pix = plan.pixel_visible()
    assert pix.shape == (2, 1, 8, 8)
    np.testing.assert_array_equal(pix[:, 0, ::4, ::4], plan.visible)


def test_max_pool_follows_strided_conv_grid():
    m = np.zeros((1, 1, 5, 5), dtype=np.float32)
    m[0, 0, 4, 4] = 1
    pooled = max_pool2(m)
    assert pooled.shape == (1, 1, 3, 3)
    assert pooled[0, 0, 2, 2] == 1 and pooled.sum() == 1


def test_sparsity_map_derives_coarser_levels():
    smap = SparsityMap.from_pixels(np.ones((2, 1, 16, 16)))
    assert smap.at((4, 4)).shape == (2, 1, 4, 4)
    assert (8, 8) in smap.maps
    assert len(smap.pyramid(2)) == 3
    with pytest.raises(ShapeError):
        smap.at((5, 5))


def test_sparse_conv_is_zero_at_inactive_positions(rng):
    active = (rng.uniform(size=(2, 1, 6, 6)) > 0.5).astype(np.float32)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    y = spike_sparse_conv(x, w, None, SparsityMap.from_pixels(active)).data
    assert (y * (1 - active) == 0).all()


def test_sparse_conv_never_leaks(rng):
    plan = make_mask((2, 1, 16, 16), p=4, mu=0.6, seed=1)
    x = rng.uniform(0, 4, (2, 2, 16, 16)).astype(np.float32) * plan.pixel_visible()
    table = leakage_profile(np.round(x), plan.sparsity_map(), depth=6, d_cap=4)
    assert table['layer'].tolist() == [1, 2, 3, 4, 5, 6]
    assert (table['ssc_leak_fraction'] == 0).all()
    assert (table['ssc_max_masked'] == 0).all()
    assert (table['vsc_max_masked'].iloc[:2] > 0).any()
    assert (table['vsc_leak_fraction'].iloc[:2] > 0).any()


def test_patchify_and_normalization(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    patches = patchify(x, 4)
    assert patches.shape == (2, 4, 48)
    np.testing.assert_array_equal(patches[0, 1, :3], x[0, :, 0, 4])
    norm = normalize_patches(patches)
    np.testing.assert_allclose(norm.mean(axis=-1), 0, atol=1e-5)
    flat = normalize_patches(np.ones((1, 2, 16)))
    assert np.isfinite(flat).all() and (flat == 0).all()


def test_loss_ignores_visible_patches(rng):
    target = rng.normal(size=(1, 4, 8)).astype(np.float32)
    pred = target.copy()
    pred[0, 0] += 5.0
    mask = np.array([[0, 1, 1, 0]])
    assert float(masked_patch_loss(Tensor(pred), target, mask).data) == 0.0
    mask = np.array([[1, 0, 0, 0]])
    assert float(masked_patch_loss(Tensor(pred), target, mask).data) == pytest.approx(25.0)
    with pytest.raises(ShapeError):
        masked_patch_loss(Tensor(pred), target, np.zeros((1, 4)))


def test_effective_rank(rng):
    assert effective_rank(np.eye(5)) == pytest.approx(5.0)
    assert effective_rank(np.outer(rng.normal(size=6), rng.normal(size=3))) == pytest.approx(1.0)
    assert effective_rank(np.zeros((4, 3))) == 1.0
    with pytest.raises(ShapeError):
        effective_rank(np.ones(3))
    with pytest.raises(NonFiniteError):
        effective_rank(np.array([[1.0, np.nan], [0.0, 1.0]]))


@given(scale=st.floats(1e-3, 1e3))
@settings(max_examples=25, deadline=None)
def test_effective_rank_is_scale_invariant(scale):
    z = np.random.default_rng(0).normal(size=(10, 4))
    assert effective_rank(z * scale) == pytest.approx(effective_rank(z), rel=1e-9)


def test_encoder_must_end_on_patch_grid():
    with pytest.raises(ConfigError):
        build_encoder(tiny_spec(), patch=2)
    assert build_encoder(tiny_spec(), patch=4).stem.conv.sparse


def test_pretrain_step_updates_encoder_and_decoder(rng):
    spec = tiny_spec()
    encoder = build_encoder(spec, 4)
    decoder = build_decoder(spec, 4, width=16, depth=1, heads=2)
    batch = rng.uniform(0, 1, (4, 1, 16, 16)).astype(np.float32)
    plan = make_mask(batch.shape, 4, 0.5, seed=0)
    before = decoder.params['pred_w'].data.copy()
    opt = AdamW({**encoder.named_parameters(), **{f'd.{k}': v for k, v in decoder.named_parameters().items()}},
                AdamWHyper(lr=1e-2))
    loss = mim_pretrain_step(encoder, decoder, batch, plan, opt)
    assert np.isfinite(loss) and loss > 0
    assert not np.array_equal(before, decoder.params['pred_w'].data)


def test_pretrain_history_and_finetune_conversion(rng):
    spec = tiny_spec()
    encoder = build_encoder(spec, 4)
    decoder = build_decoder(spec, 4, width=16, depth=1, heads=2)
    images = rng.uniform(0, 1, (8, 1, 16, 16)).astype(np.float32)
    history = pretrain_mim(encoder, decoder, images, images[:4], steps=3, batch_size=4, patch=4,
                           mu=0.5, seed=0, rank_every=2)
    assert list(history['step']) == [1, 2, 3]
    assert history['effective_rank'].notna().tolist() == [True, True, True]
    model = finetune_convert(encoder)
    assert not model.stem.conv.sparse and encoder.stem.conv.sparse
    for name, p in encoder.named_parameters().items():
        np.testing.assert_array_equal(p.data, model.named_parameters()[name].data)


@pytest.mark.slow
def test_effective_rank_grows_with_integer_spikes_only():
    growth = {}
    for d_cap in (4, 1):
        ratios = []
        for seed in (0, 1, 2):
            cfg = load_config(CONFIGS / 'mim.cfg', {'seed': seed, 'neuron.d_cap': d_cap})
            ranks = pretrain_from_config(cfg).history['effective_rank'].dropna()
            assert len(ranks) == 21
            ratios.append(ranks.iloc[-1] / ranks.iloc[0])
        growth[d_cap] = float(np.mean(ratios))
    assert growth[4] > 1.0
    assert growth[1] <= 1.05
