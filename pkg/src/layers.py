"""Parameterized layers: synapse (conv/linear + BN), spiking neuron, classifier head."""

from __future__ import annotations

import logging
from typing import Iterator

import numpy as np

from config import BN_EPS, BN_MOMENTUM
from src.conv import batchnorm, conv2d, output_size
from src.errors import ParameterError
from src.neuron import NeuronConfig, carry_membrane, check_integer_activation, fire_d
from src.tensor import Tensor, matmul, parameter

logger = logging.getLogger(__name__)


class Module:
    """Named tree of parameters (Tensors) and buffers (arrays)."""

    def __init__(self):
        self.children: dict[str, Module] = {}
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def add(self, name: str, module: 'Module') -> 'Module':
        self.children[name] = module
        return module

    def named_modules(self, prefix: str = '') -> Iterator[tuple[str, 'Module']]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f'{prefix}.{name}' if prefix else name)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for path, module in self.named_modules():
            for name, p in module.params.items():
                out[f'{path}.{name}' if path else name] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for path, module in self.named_modules():
            for name, b in module.buffers.items():
                out[f'{path}.{name}' if path else name] = b
        return out

    def train(self, mode: bool = True) -> 'Module':
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Synapse(Module):
    """
    Conv (or linear as a 1x1 conv over the token grid) followed by BN.

    in_scale is 1/D when the input is an integer spike count, 1 for real input.
    With sparse=True and a sparsity map, outputs at inactive centers are zero
    and BN statistics come from active positions only.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 1,
                 stride: int = 1, groups: int = 1, in_scale: float = 1.0,
                 sparse: bool = False, dtype=np.float32):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ParameterError(f'channels {c_in}->{c_out} not divisible by groups={groups}')
        if k % 2 == 0:
            raise ParameterError(f'kernel size must be odd, got {k}')
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding, self.groups = stride, k // 2, groups
        self.in_scale = in_scale
        self.sparse = sparse
        fan_in = (c_in // groups) * k * k
        self.params['weight'] = parameter(kaiming(rng, (c_out, c_in // groups, k, k), fan_in, dtype))
        self.params['bias'] = parameter(np.zeros(c_out, dtype=dtype))
        self.params['bn_gamma'] = parameter(np.ones(c_out, dtype=dtype))
        self.params['bn_beta'] = parameter(np.zeros(c_out, dtype=dtype))
        self.buffers['running_mean'] = np.zeros(c_out, dtype=dtype)
        self.buffers['running_var'] = np.ones(c_out, dtype=dtype)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (output_size(h, self.k, self.stride, self.padding),
                output_size(w, self.k, self.stride, self.padding))

    def __call__(self, x: Tensor, smap=None) -> Tensor:
        if self.in_scale != 1.0:
            x = x * self.in_scale
        p = self.params
        y = conv2d(x, p['weight'], p['bias'], self.stride, self.padding, self.groups)
        mask = smap.at(y.shape[2:]) if (self.sparse and smap is not None) else None
        if mask is not None:
            y = y * mask
        y = batchnorm(y, self.buffers['running_mean'], self.buffers['running_var'],
                      p['bn_gamma'], p['bn_beta'], self.training,
                      momentum=BN_MOMENTUM, eps=BN_EPS, mask=mask)
        if mask is not None:
            y = y * mask
        return y


class SpikingNeuron(Module):
    """
    S = Fire_D(U / V_th), an integer count in [0, D].

    Stateful across windows when cfg.t_steps > 1: U = beta * H + X, then the
    configured reset carries H into the next window.
    """

    def __init__(self, cfg: NeuronConfig, v_th: float | None = None):
        super().__init__()
        self.cfg = cfg
        self.v_th = cfg.v_th if v_th is None else v_th
        self.state: Tensor | None = None
        self.tap: list[np.ndarray] | None = None
        self.check = True

    def reset_state(self) -> None:
        self.state = None

    def __call__(self, x: Tensor) -> Tensor:
        u = x
        if self.cfg.t_steps > 1 and self.state is not None:
            u = self.state * self.cfg.beta + x
        s = fire_d(u * (1.0 / self.v_th), self.cfg.d_cap)
        if self.check:
            check_integer_activation(s.data, self.cfg.d_cap, 'spiking layer output')
        if self.cfg.t_steps > 1:
            self.state = carry_membrane(_with_threshold(self.cfg, self.v_th), u, s)
        if self.tap is not None:
            self.tap.append(s.data.copy())
        return s


def _with_threshold(cfg: NeuronConfig, v_th: float) -> NeuronConfig:
    if v_th == cfg.v_th:
        return cfg
    return NeuronConfig(cfg.beta, v_th, cfg.v_reset, cfg.reset_mode, cfg.d_cap, cfg.t_steps)


class Head(Module):
    """Global average pool of spike rates, then a linear classifier."""

    def __init__(self, rng: np.random.Generator, c_in: int, num_classes: int, in_scale: float,
                 dtype=np.float32):
        super().__init__()
        self.in_scale = in_scale
        self.params['weight'] = parameter((rng.standard_normal((c_in, num_classes))
                                           / np.sqrt(c_in)).astype(dtype))
        self.params['bias'] = parameter(np.zeros((1, num_classes), dtype=dtype))

    def __call__(self, s: Tensor) -> Tensor:
        pooled = (s * self.in_scale).mean(axis=(2, 3))
        return matmul(pooled, self.params['weight']) + self.params['bias']
