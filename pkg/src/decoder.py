"""Small non-spiking transformer that reconstructs patches from encoder tokens."""

from __future__ import annotations

import numpy as np

from config import DECODER_DEPTH, DECODER_HEADS, DECODER_WIDTH
from src.errors import ParameterError, ShapeError
from src.layers import Module
from src.tensor import Tensor, layer_norm, matmul, parameter, softmax


def _dense(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    w = parameter((rng.standard_normal((n_in, n_out)) * np.sqrt(1.0 / n_in)).astype(np.float32))
    return w, parameter(np.zeros((1, n_out), dtype=np.float32))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Token-wise affine map on (N, L, C)."""
    n, length, c = x.shape
    y = matmul(x.reshape(n * length, c), w) + b
    return y.reshape(n, length, w.shape[1])


class DecoderLayer(Module):
    """Pre-norm softmax attention + ReLU MLP."""

    def __init__(self, rng, width: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        if width % heads:
            raise ParameterError(f'{heads} heads do not divide decoder width {width}')
        self.heads = heads
        hidden = int(width * mlp_ratio)
        p = self.params
        for norm in ('ln1', 'ln2'):
            p[f'{norm}_gamma'] = parameter(np.ones((1, 1, width), dtype=np.float32))
            p[f'{norm}_beta'] = parameter(np.zeros((1, 1, width), dtype=np.float32))
        for name, (n_in, n_out) in {'q': (width, width), 'k': (width, width), 'v': (width, width),
                                    'out': (width, width), 'fc1': (width, hidden),
                                    'fc2': (hidden, width)}.items():
            p[f'{name}_w'], p[f'{name}_b'] = _dense(rng, n_in, n_out)

    def attention(self, x: Tensor) -> Tensor:
        p = self.params
        n, length, width = x.shape
        dh = width // self.heads

        def heads(t: Tensor) -> Tensor:
            return t.reshape(n, length, self.heads, dh).transpose(0, 2, 1, 3)

        q = heads(linear(x, p['q_w'], p['q_b']))
        k = heads(linear(x, p['k_w'], p['k_b']))
        v = heads(linear(x, p['v_w'], p['v_b']))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        mixed = matmul(softmax(scores, axis=-1), v).transpose(0, 2, 1, 3).reshape(n, length, width)
        return linear(mixed, p['out_w'], p['out_b'])

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        x = x + self.attention(layer_norm(x, p['ln1_gamma'], p['ln1_beta']))
        h = linear(layer_norm(x, p['ln2_gamma'], p['ln2_beta']), p['fc1_w'], p['fc1_b']).relu()
        return x + linear(h, p['fc2_w'], p['fc2_b'])


class Decoder(Module):
    """
    tokens (N, L, C) -> embed -> masked slots replaced by a learned mask token
    -> + learned positions -> transformer layers -> per-patch pixels (N, L, P).
    """

    def __init__(self, enc_channels: int, num_patches: int, patch_dim: int,
                 width: int = DECODER_WIDTH, depth: int = DECODER_DEPTH,
                 heads: int = DECODER_HEADS, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.num_patches = num_patches
        p = self.params
        p['embed_w'], p['embed_b'] = _dense(rng, enc_channels, width)
        p['mask_token'] = parameter((rng.standard_normal((1, 1, width)) * 0.02).astype(np.float32))
        p['pos'] = parameter((rng.standard_normal((1, num_patches, width)) * 0.02).astype(np.float32))
        p['norm_gamma'] = parameter(np.ones((1, 1, width), dtype=np.float32))
        p['norm_beta'] = parameter(np.zeros((1, 1, width), dtype=np.float32))
        p['pred_w'], p['pred_b'] = _dense(rng, width, patch_dim)
        self.layers = [self.add(f'layers.{i}', DecoderLayer(rng, width, heads)) for i in range(depth)]

    def __call__(self, tokens: Tensor, visible: np.ndarray) -> Tensor:
        n, length, _ = tokens.shape
        if length != self.num_patches or visible.shape != (n, length):
            raise ShapeError(f'decoder expects {self.num_patches} tokens with a matching (N, L) visibility map')
        p = self.params
        keep = visible.reshape(n, length, 1).astype(np.float32)
        x = linear(tokens, p['embed_w'], p['embed_b'])
        x = x * keep + p['mask_token'] * (1.0 - keep) + p['pos']
        for layer in self.layers:
            x = layer(x)
        x = layer_norm(x, p['norm_gamma'], p['norm_beta'])
        return linear(x, p['pred_w'], p['pred_b'])
