"""
Conv- and transformer-style spiking blocks.

All residual additions act on membrane potentials:
    conv block:         U' = U + SpikeSepConv(U);  U'' = U' + ChannelConv(U')
    transformer block:  U' = U + SpikeSepConv(U);  U'' = U' + E-SDSA(U');  U''' = U'' + ChannelMLP(U'')
Every SN emits integer counts in [0, D]; the next synapse scales them by 1/D.
"""

from __future__ import annotations

import math

import numpy as np

from src.errors import ParameterError, ShapeError
from src.layers import Module, SpikingNeuron, Synapse
from src.neuron import NeuronConfig
from src.tensor import Tensor, matmul


class SpikeSepConv(Module):
    """pw1 -> dw -> pw2, an SN in front of each conv."""

    def __init__(self, rng, cfg: NeuronConfig, channels: int, ratio: float = 2.0,
                 kernel: int = 3, mid_sn: bool = True, sparse: bool = False):
        super().__init__()
        hidden = int(round(channels * ratio))
        rate = 1.0 / cfg.d_cap
        self.mid_sn = mid_sn
        self.sn1 = self.add('sn1', SpikingNeuron(cfg))
        self.pw1 = self.add('pw1', Synapse(rng, channels, hidden, 1, in_scale=rate, sparse=sparse))
        self.sn2 = self.add('sn2', SpikingNeuron(cfg))
        self.dw = self.add('dw', Synapse(rng, hidden, hidden, kernel, groups=hidden, in_scale=rate, sparse=sparse))
        if mid_sn:
            self.sn3 = self.add('sn3', SpikingNeuron(cfg))
        self.pw2 = self.add('pw2', Synapse(rng, hidden, channels, 1, in_scale=rate if mid_sn else 1.0,
                                           sparse=sparse))
        self.channels = channels

    def __call__(self, u: Tensor, smap=None) -> Tensor:
        if u.ndim != 4 or u.shape[1] != self.channels:
            raise ParameterError(f'SpikeSepConv expects (N, {self.channels}, H, W), got {u.shape}')
        x = self.pw1(self.sn1(u), smap)
        x = self.dw(self.sn2(x), smap)
        if self.mid_sn:
            x = self.sn3(x)
        return self.pw2(x, smap)


class ChannelConv(Module):
    """Conv(SN(Conv(SN(u)))) with 3x3 kernels."""

    def __init__(self, rng, cfg: NeuronConfig, channels: int, ratio: float = 2.0,
                 kernel: int = 3, sparse: bool = False):
        super().__init__()
        hidden = int(round(channels * ratio))
        rate = 1.0 / cfg.d_cap
        self.sn1 = self.add('sn1', SpikingNeuron(cfg))
        self.conv1 = self.add('conv1', Synapse(rng, channels, hidden, kernel, in_scale=rate, sparse=sparse))
        self.sn2 = self.add('sn2', SpikingNeuron(cfg))
        self.conv2 = self.add('conv2', Synapse(rng, hidden, channels, kernel, in_scale=rate, sparse=sparse))

    def __call__(self, u: Tensor, smap=None) -> Tensor:
        return self.conv2(self.sn2(self.conv1(self.sn1(u), smap)), smap)


class ChannelMLP(Module):
    """Linear(SN(Linear(SN(u)))) applied per token."""

    def __init__(self, rng, cfg: NeuronConfig, channels: int, ratio: float = 2.0, sparse: bool = False):
        super().__init__()
        hidden = int(round(channels * ratio))
        rate = 1.0 / cfg.d_cap
        self.sn1 = self.add('sn1', SpikingNeuron(cfg))
        self.fc1 = self.add('fc1', Synapse(rng, channels, hidden, 1, in_scale=rate, sparse=sparse))
        self.sn2 = self.add('sn2', SpikingNeuron(cfg))
        self.fc2 = self.add('fc2', Synapse(rng, hidden, channels, 1, in_scale=rate, sparse=sparse))

    def __call__(self, u: Tensor, smap=None) -> Tensor:
        return self.fc2(self.sn2(self.fc1(self.sn1(u), smap)), smap)


def attention_scale(channels: int, heads: int, d_cap: int) -> float:
    """1/sqrt(head dim) on rates; integer Q, K, V add a 1/D^3 factor."""
    return 1.0 / math.sqrt(channels // heads) / d_cap ** 3


def linear_attention(q: np.ndarray | Tensor, k, v, heads: int):
    """
    Per head A = Q (K^T V), K^T V computed first.

    q, k: (N, C, H, W); v: (N, gC, H, W). Returns (N, gC, H, W).
    Works on Tensors (training) and raw arrays (inference).
    """
    n, c, h, w = q.shape
    cv = v.shape[1]
    if c % heads or cv % heads:
        raise ParameterError(f'{heads} heads do not divide channels {c}/{cv}')
    length = h * w
    dh, dv = c // heads, cv // heads
    if isinstance(q, Tensor):
        qh = q.reshape(n, heads, dh, length).transpose(0, 1, 3, 2)
        kh = k.reshape(n, heads, dh, length)
        vh = v.reshape(n, heads, dv, length).transpose(0, 1, 3, 2)
        a = matmul(qh, matmul(kh, vh))
        return a.transpose(0, 1, 3, 2).reshape(n, cv, h, w)
    qh = q.reshape(n, heads, dh, length).transpose(0, 1, 3, 2)
    kh = k.reshape(n, heads, dh, length)
    vh = v.reshape(n, heads, dv, length).transpose(0, 1, 3, 2)
    a = qh @ (kh @ vh)
    return a.transpose(0, 1, 3, 2).reshape(n, cv, h, w)


class ESDSA(Module):
    """
    Spike-driven linear attention with gamma-expanded V:
        Q = SN(BN(Linear(S))), K = SN(BN(Linear(S))), V = SN(BN(Linear_gamma(S)))
        out = BN(Linear_{1/gamma}(SN(Q (K^T V) * scale)))
    The scale lives in the attention SN's threshold.
    """

    def __init__(self, rng, cfg: NeuronConfig, channels: int, heads: int, gamma: float = 2.0,
                 sparse: bool = False):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ParameterError(f'{heads} heads do not divide {channels} channels')
        v_channels = gamma * channels
        if v_channels != int(v_channels) or int(v_channels) % heads:
            raise ParameterError(f'gamma={gamma} gives V width {v_channels}, not divisible by heads')
        v_channels = int(v_channels)
        rate = 1.0 / cfg.d_cap
        self.heads = heads
        self.channels = channels
        self.scale = attention_scale(channels, heads, cfg.d_cap)
        self.sn_in = self.add('sn_in', SpikingNeuron(cfg))
        self.q = self.add('q', Synapse(rng, channels, channels, 1, in_scale=rate, sparse=sparse))
        self.k = self.add('k', Synapse(rng, channels, channels, 1, in_scale=rate, sparse=sparse))
        self.v = self.add('v', Synapse(rng, channels, v_channels, 1, in_scale=rate, sparse=sparse))
        self.sn_q = self.add('sn_q', SpikingNeuron(cfg))
        self.sn_k = self.add('sn_k', SpikingNeuron(cfg))
        self.sn_v = self.add('sn_v', SpikingNeuron(cfg))
        self.sn_attn = self.add('sn_attn', SpikingNeuron(cfg, v_th=cfg.v_th / self.scale))
        self.proj = self.add('proj', Synapse(rng, v_channels, channels, 1, in_scale=rate, sparse=sparse))

    def __call__(self, u: Tensor, smap=None) -> Tensor:
        if u.ndim != 4 or u.shape[1] != self.channels:
            raise ShapeError(f'E-SDSA expects (N, {self.channels}, H, W), got {u.shape}')
        s = self.sn_in(u)
        q = self.sn_q(self.q(s, smap))
        k = self.sn_k(self.k(s, smap))
        v = self.sn_v(self.v(s, smap))
        a = linear_attention(q, k, v, self.heads)
        return self.proj(self.sn_attn(a), smap)


class ConvBlock(Module):
    def __init__(self, rng, cfg: NeuronConfig, spec, sparse: bool = False):
        super().__init__()
        self.sep = self.add('sep', SpikeSepConv(rng, cfg, spec.channels, spec.sep_ratio, spec.kernel,
                                                spec.mid_sn, sparse))
        self.mixer = self.add('mixer', ChannelConv(rng, cfg, spec.channels, spec.mlp_ratio, spec.kernel, sparse))

    def __call__(self, u: Tensor, smap=None) -> Tensor:
        u = u + self.sep(u, smap)
        return u + self.mixer(u, smap)


class TransformerBlock(Module):
    def __init__(self, rng, cfg: NeuronConfig, spec, sparse: bool = False):
        super().__init__()
        self.sep = None
        if spec.pre_sep:
            self.sep = self.add('sep', SpikeSepConv(rng, cfg, spec.channels, spec.sep_ratio, spec.kernel,
                                                    spec.mid_sn, sparse))
        self.attn = self.add('attn', ESDSA(rng, cfg, spec.channels, spec.heads, spec.gamma, sparse))
        self.mlp = self.add('mlp', ChannelMLP(rng, cfg, spec.channels, spec.mlp_ratio, sparse))

    def __call__(self, u: Tensor, smap=None) -> Tensor:
        if self.sep is not None:
            u = u + self.sep(u, smap)
        u = u + self.attn(u, smap)
        return u + self.mlp(u, smap)


class Downsample(Module):
    """Strided 3x3 conv + BN; the SN in front is skipped for the real-valued image stem."""

    def __init__(self, rng, cfg: NeuronConfig, c_in: int, c_out: int, spiking_input: bool = True,
                 sparse: bool = False):
        super().__init__()
        self.sn = self.add('sn', SpikingNeuron(cfg)) if spiking_input else None
        self.conv = self.add('conv', Synapse(rng, c_in, c_out, 3, stride=2,
                                             in_scale=1.0 / cfg.d_cap if spiking_input else 1.0,
                                             sparse=sparse))

    def __call__(self, u: Tensor, smap=None) -> Tensor:
        x = self.sn(u) if self.sn is not None else u
        return self.conv(x, smap)


def residual_branches(block: Module) -> list[Synapse]:
    """Last synapse of every residual branch in a block."""
    branches = []
    for name in ('sep', 'mixer', 'attn', 'mlp'):
        sub = block.children.get(name)
        if sub is None:
            continue
        last = list(sub.children.values())[-1]
        branches.append(last)
    return branches
