"""
Masked image modeling with spike sparse convolution.

A random subset of patches is masked; the encoder convolves only at active
centers (outputs elsewhere are exactly zero), and a small transformer decoder
reconstructs per-patch normalized pixels of the masked patches:
    loss = mean over masked patches of ||pred - (x - mean) / max(std, floor)||^2
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import svdvals

from config import MASK_RATIO, MIM_STEPS, PATCH_SIZE, PATCH_STD_FLOOR, RANK_EVERY
from src.conv import conv2d
from src.decoder import Decoder
from src.errors import ConfigError, NonFiniteError, ShapeError
from src.model import Model, ModelSpec, build_model
from src.neuron import fire_d, round_half_up
from src.optim import AdamW, AdamWHyper
from src.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def max_pool2(mask: np.ndarray) -> np.ndarray:
    """Any-coverage 2x2 pooling matching a stride-2, pad-1, 3x3 conv grid: (H-1)//2 + 1."""
    n, c, h, w = mask.shape
    ph, pw = h + h % 2, w + w % 2
    padded = np.zeros((n, c, ph, pw), dtype=mask.dtype)
    padded[:, :, :h, :w] = mask
    return padded.reshape(n, c, ph // 2, 2, pw // 2, 2).max(axis=(3, 5))


@dataclass
class SparsityMap:
    """Active-position maps (N, 1, h, w) keyed by resolution, derived by max-pool from the finest."""
    maps: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_pixels(cls, active: np.ndarray) -> 'SparsityMap':
        active = np.asarray(active, dtype=np.float32)
        if active.ndim != 4 or active.shape[1] != 1:
            raise ShapeError(f'pixel map must be (N, 1, H, W), got {active.shape}')
        return cls({tuple(active.shape[2:]): active})

    @classmethod
    def full(cls, n: int, h: int, w: int) -> 'SparsityMap':
        return cls.from_pixels(np.ones((n, 1, h, w), dtype=np.float32))

    def at(self, hw) -> np.ndarray:
        hw = tuple(int(v) for v in hw)
        if hw in self.maps:
            return self.maps[hw]
        finest = max(self.maps, key=lambda k: k[0] * k[1])
        current = self.maps[finest]
        while current.shape[2] > hw[0]:
            current = max_pool2(current)
            self.maps.setdefault(tuple(current.shape[2:]), current)
        if tuple(current.shape[2:]) != hw:
            raise ShapeError(f'no sparsity map derivable at resolution {hw} from {finest}')
        return current

    def pyramid(self, levels: int) -> list[np.ndarray]:
        finest = max(self.maps, key=lambda k: k[0] * k[1])
        out = [self.maps[finest]]
        for _ in range(levels):
            out.append(self.at(max_pool2(out[-1]).shape[2:]))
        return out


@dataclass
class MaskPlan:
    """mask[n, i, j] == 1 marks a masked patch."""
    patch_size: int
    ratio: float
    mask: np.ndarray
    seed: int

    @property
    def num_patches(self) -> int:
        return int(self.mask[0].size)

    @property
    def r2(self) -> int:
        return int(self.mask[0].sum())

    @property
    def r1(self) -> int:
        return self.num_patches - self.r2

    @property
    def visible(self) -> np.ndarray:
        return (1 - self.mask).astype(np.uint8)

    def masked_indices(self, i: int = 0) -> np.ndarray:
        return np.flatnonzero(self.mask[i].ravel())

    def visible_indices(self, i: int = 0) -> np.ndarray:
        return np.flatnonzero(self.visible[i].ravel())

    def pixel_visible(self) -> np.ndarray:
        """(N, 1, H, W) map of visible pixels."""
        p = self.patch_size
        return np.kron(self.visible, np.ones((p, p), dtype=np.uint8))[:, None].astype(np.float32)

    def sparsity_map(self) -> SparsityMap:
        return SparsityMap.from_pixels(self.pixel_visible())


def make_mask(image_shape, p: int = PATCH_SIZE, mu: float = MASK_RATIO, seed: int = 0) -> MaskPlan:
    """Mask round(n * mu) of n patches per image (at least one when mu > 0, never all)."""
    shape = tuple(image_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    if len(shape) != 4:
        raise ShapeError(f'image shape must be (C, H, W) or (N, C, H, W), got {image_shape}')
    if not 0.0 <= mu < 1.0:
        raise ConfigError(f'mask ratio must lie in [0, 1), got {mu}')
    n_img, _, h, w = shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f'image {h}x{w} not divisible into {p}x{p} patches')
    gh, gw = h // p, w // p
    n = gh * gw
    r2 = int(round_half_up(np.float64(n * mu)))
    if mu > 0:
        r2 = max(r2, 1)
    if n > 1:
        r2 = min(r2, n - 1)
    rng = np.random.default_rng(seed)
    mask = np.zeros((n_img, n), dtype=np.uint8)
    for i in range(n_img):
        mask[i, rng.permutation(n)[:r2]] = 1
    return MaskPlan(patch_size=p, ratio=mu, mask=mask.reshape(n_img, gh, gw), seed=seed)


def spike_sparse_conv(x: Tensor, w: Tensor, b: Tensor | None, smap: SparsityMap,
                      stride: int = 1, padding: int | None = None, groups: int = 1) -> Tensor:
    """Convolution evaluated only at active centers; inactive outputs are exactly zero."""
    pad = w.shape[2] // 2 if padding is None else padding
    y = conv2d(x, w, b, stride, pad, groups)
    mask = smap.at(y.shape[2:])
    if mask.shape[0] != y.shape[0]:
        raise ShapeError(f'sparsity map batch {mask.shape[0]} != input batch {y.shape[0]}')
    return y * mask


def vanilla_spike_conv(x: Tensor, w: Tensor, b: Tensor | None,
                       stride: int = 1, padding: int | None = None, groups: int = 1) -> Tensor:
    """Convolution at every position, kept for leakage comparisons."""
    pad = w.shape[2] // 2 if padding is None else padding
    return conv2d(x, w, b, stride, pad, groups)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(N, C, H, W) -> (N, L, p*p*C), patches in row-major grid order."""
    n, c, h, w = x.shape
    gh, gw = h // p, w // p
    return (x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1)
            .reshape(n, gh * gw, p * p * c))


def normalize_patches(patches: np.ndarray, floor: float = PATCH_STD_FLOOR) -> np.ndarray:
    mean = patches.mean(axis=-1, keepdims=True)
    std = np.maximum(patches.std(axis=-1, keepdims=True), floor)
    return ((patches - mean) / std).astype(np.float32)


def masked_patch_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """MSE over masked patches only; mask is (N, L) with 1 = masked."""
    weight = mask.reshape(mask.shape[0], -1, 1).astype(pred.dtype)
    count = float(weight.sum()) * pred.shape[-1]
    if count == 0:
        raise ShapeError('no masked patches to reconstruct')
    diff = pred - target
    return (diff * diff * weight).sum() * (1.0 / count)


def encoder_tokens(encoder: Model, x: Tensor, smap: SparsityMap | None) -> Tensor:
    """Rates of the last SN layer as (N, L, C) tokens."""
    s = encoder.features(x, smap)
    n, c, h, w = s.shape
    return (s * (1.0 / encoder.spec.neuron.d_cap)).reshape(n, c, h * w).transpose(0, 2, 1)


def build_encoder(spec: ModelSpec, patch: int = PATCH_SIZE) -> Model:
    h, w = spec.input_shape[1:]
    if h % patch or w % patch:
        raise ConfigError(f'input {h}x{w} not divisible by patch {patch}')
    if spec.resolutions()[-1] != (h // patch, w // patch):
        raise ConfigError(f'encoder output grid {spec.resolutions()[-1]} does not match '
                          f'{h // patch}x{w // patch} patches')
    return build_model(spec, sparse=True)


def build_decoder(spec: ModelSpec, patch: int = PATCH_SIZE, **kwargs) -> Decoder:
    c, h, w = spec.input_shape
    width = spec.stages[-1][-1].channels
    return Decoder(width, (h // patch) * (w // patch), patch * patch * c, seed=spec.seed + 1, **kwargs)


def mim_pretrain_step(encoder: Model, decoder: Decoder, batch: np.ndarray, plan: MaskPlan,
                      opt: AdamW | None = None) -> float:
    """One masked reconstruction step; updates parameters when an optimizer is given."""
    x = Tensor(batch * plan.pixel_visible())
    tokens = encoder_tokens(encoder, x, plan.sparsity_map())
    flat_mask = plan.mask.reshape(plan.mask.shape[0], -1)
    pred = decoder(tokens, 1 - flat_mask)
    target = normalize_patches(patchify(batch, plan.patch_size))
    loss = masked_patch_loss(pred, target, flat_mask)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f'non-finite reconstruction loss {value}')
    if opt is not None:
        opt.zero_grad()
    loss.backward()
    if opt is not None:
        opt.step()
    return value


def effective_rank(z: np.ndarray) -> float:
    """exp of the entropy of normalized singular values; all-zero input gives 1 (logged)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f'effective_rank expects a 2-d matrix, got shape {z.shape}')
    if not np.all(np.isfinite(z)):
        raise NonFiniteError('effective_rank needs finite entries')
    sigma = svdvals(z)
    total = sigma.sum()
    if total == 0:
        logger.warning('effective rank of an all-zero matrix: reporting 1')
        return 1.0
    p = sigma / total
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def finetune_convert(encoder: Model) -> Model:
    """Same weights, vanilla convolutions everywhere."""
    converted = copy.deepcopy(encoder)
    converted.set_sparse(False)
    return converted


def leakage_profile(x: np.ndarray, smap: SparsityMap, depth: int = 6, d_cap: int = 4,
                    kernel: int = 3, seed: int = 0) -> pd.DataFrame:
    """
    Per layer of an SSC stack and a VSC stack sharing weights, the fraction of
    inactive positions holding a nonzero output.
    """
    rng = np.random.default_rng(seed)
    c = x.shape[1]
    s_ssc = Tensor(x)
    s_vsc = Tensor(x)
    inactive = 1.0 - smap.at(x.shape[2:])
    total = float(inactive.sum()) * c
    rows = []
    with no_grad():
        for layer in range(1, depth + 1):
            w = Tensor(rng.uniform(0.0, 1.0, (c, c, kernel, kernel)).astype(np.float32))
            y_ssc = spike_sparse_conv(s_ssc, w, None, smap)
            y_vsc = vanilla_spike_conv(s_vsc, w, None)
            leak_ssc = float((np.abs(y_ssc.data) * inactive > 0).sum())
            leak_vsc = float((np.abs(y_vsc.data) * inactive > 0).sum())
            rows.append({'layer': layer,
                         'ssc_leak_fraction': leak_ssc / total if total else 0.0,
                         'vsc_leak_fraction': leak_vsc / total if total else 0.0,
                         'ssc_max_masked': float(np.abs(y_ssc.data * inactive).max()),
                         'vsc_max_masked': float(np.abs(y_vsc.data * inactive).max())})
            s_ssc = fire_d(y_ssc, d_cap)
            s_vsc = fire_d(y_vsc, d_cap)
    return pd.DataFrame(rows)


def pretrain_mim(encoder: Model, decoder: Decoder, images: np.ndarray, heldout: np.ndarray,
                 steps: int = MIM_STEPS, batch_size: int = 32, patch: int = PATCH_SIZE,
                 mu: float = MASK_RATIO, hyper: AdamWHyper | None = None, seed: int = 0,
                 rank_every: int = RANK_EVERY) -> pd.DataFrame:
    """Run masked pretraining; returns per-step loss and periodic effective rank."""
    params = {**{f'encoder.{k}': v for k, v in encoder.named_parameters().items()},
              **{f'decoder.{k}': v for k, v in decoder.named_parameters().items()}}
    opt = AdamW(params, hyper)
    rng = np.random.default_rng(seed)
    rows = []
    start = time.perf_counter()
    for step in range(1, steps + 1):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        batch = images[idx]
        plan = make_mask(batch.shape, patch, mu, seed=seed * 100_003 + step)
        encoder.train()
        decoder.train()
        loss = mim_pretrain_step(encoder, decoder, batch, plan, opt)
        row = {'step': step, 'loss': loss, 'effective_rank': np.nan}
        if step == 1 or step == steps or step % rank_every == 0:
            row['effective_rank'] = heldout_rank(encoder, heldout)
            logger.info('mim step %d: loss %.4f rank %.3f (%.1fs)', step, loss,
                        row['effective_rank'], time.perf_counter() - start)
        rows.append(row)
    return pd.DataFrame(rows)


def heldout_rank(encoder: Model, heldout: np.ndarray) -> float:
    was_training = encoder.training
    encoder.eval()
    with no_grad():
        tokens = encoder_tokens(encoder, Tensor(heldout), None).data
    encoder.train(was_training)
    return effective_rank(tokens.reshape(-1, tokens.shape[-1]))
