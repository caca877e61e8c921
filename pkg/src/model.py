"""
Declarative E-SpikeFormer description and assembly.

Topology: image -> stem (strided conv + BN) -> stages of blocks on the
membrane stream -> SN -> average-pooled rates -> linear head.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from config import (GAMMA, HEADS, INPUT_SHAPE, MLP_RATIO, MODEL_SEED, NUM_CLASSES,
                    SEP_KERNEL, SEP_RATIO, STAGES)
from src.blocks import ConvBlock, Downsample, TransformerBlock, residual_branches
from src.conv import output_size
from src.errors import ConfigError
from src.layers import Head, Module, SpikingNeuron
from src.neuron import NeuronConfig
from src.tensor import Tensor

logger = logging.getLogger(__name__)

BLOCK_KINDS = ('conv_block', 'transformer_block', 'downsample')
_SHORT_KINDS = {'conv': 'conv_block', 'transformer': 'transformer_block'}


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels: int
    heads: int = HEADS
    gamma: float = GAMMA
    mlp_ratio: float = MLP_RATIO
    sep_ratio: float = SEP_RATIO
    kernel: int = SEP_KERNEL
    pre_sep: bool = True   # SpikeSepConv ahead of attention
    mid_sn: bool = True    # SN between dw and pw2

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f'unknown block kind {self.kind!r}')
        if self.channels < 1:
            raise ConfigError(f'channels must be positive, got {self.channels}')
        if self.kind == 'transformer_block':
            if self.heads < 1 or self.channels % self.heads:
                raise ConfigError(f'{self.heads} heads do not divide {self.channels} channels')
            if self.gamma < 1 or self.gamma * self.channels != int(self.gamma * self.channels):
                raise ConfigError(f'gamma={self.gamma} must be >= 1 with integral gamma*channels')
        if self.kernel % 2 == 0:
            raise ConfigError(f'kernel must be odd, got {self.kernel}')


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple[tuple[BlockSpec, ...], ...]
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    num_classes: int = NUM_CLASSES
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    seed: int = MODEL_SEED

    def __post_init__(self):
        if not self.stages or any(not stage for stage in self.stages):
            raise ConfigError('model needs at least one non-empty stage')
        if len(self.input_shape) != 3:
            raise ConfigError(f'input_shape must be (C, H, W), got {self.input_shape}')
        if self.num_classes < 1:
            raise ConfigError('num_classes must be positive')
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage):
                if block.kind == 'downsample' and j != 0:
                    raise ConfigError(f'stage {i}: downsample allowed only as first block')
            if i > 0 and stage[0].kind != 'downsample':
                raise ConfigError(f'stage {i} must open with a downsample block')
            body = [b for b in stage if b.kind != 'downsample']
            widths = {b.channels for b in stage}
            if len(widths) != 1:
                raise ConfigError(f'stage {i} mixes widths {sorted(widths)}')
            if not body and i == 0:
                raise ConfigError('first stage has no blocks')
        self.resolutions()

    def resolutions(self) -> list[tuple[int, int]]:
        """Spatial size after the stem and after each stage; strictly decreasing at downsamples."""
        h, w = self.input_shape[1:]
        sizes = []
        for stage in [None, *self.stages]:
            if stage is None or stage[0].kind == 'downsample':
                nh, nw = output_size(h, 3, 2, 1), output_size(w, 3, 2, 1)
                if (nh, nw) == (h, w) or nh < 1:
                    raise ConfigError(f'downsample cannot shrink {h}x{w}')
                h, w = nh, nw
            sizes.append((h, w))
        return sizes

    def with_neuron(self, **changes) -> 'ModelSpec':
        return replace(self, neuron=replace(self.neuron, **changes))


def parse_stages(text: str, heads: int = HEADS, gamma: float = GAMMA, mlp_ratio: float = MLP_RATIO,
                 sep_ratio: float = SEP_RATIO, kernel: int = SEP_KERNEL) -> tuple[tuple[BlockSpec, ...], ...]:
    """
    'conv:32:2,transformer:64:2' -> stages of (kind, width, count) groups.
    A width change opens a new stage with a downsample block.
    """
    stages: list[list[BlockSpec]] = []
    width = None
    for item in text.split(','):
        parts = item.strip().split(':')
        if len(parts) != 3:
            raise ConfigError(f'bad stage item {item!r}, expected kind:channels:count')
        kind = _SHORT_KINDS.get(parts[0], parts[0])
        try:
            channels, count = int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise ConfigError(f'bad stage item {item!r}') from exc
        if kind not in ('conv_block', 'transformer_block') or count < 1:
            raise ConfigError(f'bad stage item {item!r}')
        if channels != width:
            stages.append([] if width is None else [BlockSpec('downsample', channels)])
            width = channels
        block = BlockSpec(kind, channels, heads, gamma, mlp_ratio, sep_ratio, kernel)
        stages[-1].extend([block] * count)
    return tuple(tuple(stage) for stage in stages)


def format_stages(stages: tuple[tuple[BlockSpec, ...], ...]) -> str:
    items: list[str] = []
    for stage in stages:
        body = [b for b in stage if b.kind != 'downsample']
        i = 0
        while i < len(body):
            j = i
            while j < len(body) and body[j].kind == body[i].kind:
                j += 1
            items.append(f"{body[i].kind.split('_')[0]}:{body[i].channels}:{j - i}")
            i = j
    return ','.join(items)


def default_spec(**overrides) -> ModelSpec:
    return ModelSpec(stages=parse_stages(STAGES), **overrides)


class Model(Module):
    def __init__(self, spec: ModelSpec, sparse: bool = False):
        super().__init__()
        self.spec = spec
        cfg = spec.neuron
        rng = np.random.default_rng(spec.seed)
        first = spec.stages[0][0].channels
        self.stem = self.add('stem', Downsample(rng, cfg, spec.input_shape[0], first,
                                                spiking_input=False, sparse=sparse))
        self.blocks: list[Module] = []
        width = first
        for i, stage in enumerate(spec.stages):
            for j, block in enumerate(stage):
                name = f'stages.{i}.{j}'
                if block.kind == 'downsample':
                    module = Downsample(rng, cfg, width, block.channels, sparse=sparse)
                elif block.kind == 'conv_block':
                    module = ConvBlock(rng, cfg, block, sparse)
                else:
                    module = TransformerBlock(rng, cfg, block, sparse)
                width = block.channels
                self.blocks.append(self.add(name, module))
        self.sn_out = self.add('sn_out', SpikingNeuron(cfg))
        self.head = self.add('head', Head(rng, width, spec.num_classes, 1.0 / cfg.d_cap))

    def membrane(self, x: Tensor, smap=None) -> Tensor:
        u = self.stem(x, smap)
        for block in self.blocks:
            u = block(u, smap)
        return u

    def features(self, x: Tensor, smap=None) -> Tensor:
        """Integer spikes of the last SN layer: (N, C, h, w)."""
        return self.sn_out(self.membrane(x, smap))

    def __call__(self, x: Tensor, smap=None) -> Tensor:
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ConfigError(f'input {x.shape[1:]} does not match model input {self.spec.input_shape}')
        return self.head(self.features(x, smap))

    def spiking_layers(self) -> dict[str, SpikingNeuron]:
        return {name: m for name, m in self.named_modules() if isinstance(m, SpikingNeuron)}

    def reset_state(self) -> None:
        for sn in self.spiking_layers().values():
            sn.reset_state()

    @contextlib.contextmanager
    def record(self):
        """Collect every SN output (integer counts) per layer while active."""
        taps: dict[str, list[np.ndarray]] = {}
        layers = self.spiking_layers()
        for name, sn in layers.items():
            sn.tap = taps.setdefault(name, [])
        try:
            yield taps
        finally:
            for sn in layers.values():
                sn.tap = None

    def zero_residual_branches(self) -> None:
        """Zero the BN affine closing every residual branch: blocks become identities."""
        for block in self.blocks:
            for synapse in residual_branches(block):
                synapse.params['bn_gamma'].data[...] = 0
                synapse.params['bn_beta'].data[...] = 0

    def set_sparse(self, sparse: bool) -> None:
        for _, m in self.named_modules():
            if hasattr(m, 'sparse'):
                m.sparse = sparse


def build_model(spec: ModelSpec, sparse: bool = False) -> Model:
    model = Model(spec, sparse=sparse)
    logger.info('built model: %d parameters, %d spiking layers, D=%d',
                model.num_parameters(), len(model.spiking_layers()), spec.neuron.d_cap)
    return model
