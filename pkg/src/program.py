"""
Inference export: a model flattened into a float64 dataflow program.

BN is folded into the preceding conv/linear and the 1/D rate scale of every
spike-fed synapse is baked into its weights, so downstream layers consume
integer counts (integer mode) or binary spikes (expanded modes) unmodified.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from src.blocks import ConvBlock, Downsample, ESDSA, SpikeSepConv, TransformerBlock
from src.conv import fold_bn, output_size
from src.errors import ContractError
from src.layers import Head, SpikingNeuron, Synapse
from src.model import Model
from src.neuron import NeuronConfig

logger = logging.getLogger(__name__)

INPUT = 'input'


@dataclass
class SynapseOp:
    name: str
    src: str
    dst: str
    weight: np.ndarray
    bias: np.ndarray
    stride: int
    padding: int
    groups: int
    spiking: bool

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (output_size(h, self.kernel, self.stride, self.padding),
                output_size(w, self.kernel, self.stride, self.padding))

    def fanout_map(self, h: int, w: int) -> np.ndarray:
        """Accumulations triggered by one spike at each input position (border aware)."""
        ho, wo = self.out_hw(h, w)
        ys, xs = np.arange(h), np.arange(w)
        counts = np.zeros((h, w), dtype=np.int64)
        for ky in range(self.kernel):
            oy = ys + self.padding - ky
            vy = (oy % self.stride == 0) & (oy >= 0) & (oy // self.stride < ho)
            for kx in range(self.kernel):
                ox = xs + self.padding - kx
                vx = (ox % self.stride == 0) & (ox >= 0) & (ox // self.stride < wo)
                counts += np.outer(vy, vx)
        return counts * (self.weight.shape[0] // self.groups)


@dataclass
class FireOp:
    name: str
    src: str
    v_th: float

    @property
    def dst(self) -> str:
        return self.name


@dataclass
class AddOp:
    a: str
    b: str
    dst: str


@dataclass
class AttentionOp:
    """Integer A = Q (K^T V) per head; the scale sits in the next FireOp's threshold."""
    name: str
    q: str
    k: str
    v: str
    heads: int

    @property
    def dst(self) -> str:
        return self.name


@dataclass
class HeadOp:
    """logits = sum over positions of S[c, y, x] * W[c, :] + b, W already divided by D * H * W."""
    name: str
    src: str
    weight: np.ndarray
    bias: np.ndarray
    pooled_hw: tuple[int, int]


@dataclass
class InferenceProgram:
    ops: list = field(default_factory=list)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    input_shape: tuple = ()
    num_classes: int = 0

    @property
    def fire_ops(self) -> list[FireOp]:
        return [op for op in self.ops if isinstance(op, FireOp)]

    @property
    def head(self) -> HeadOp:
        return self.ops[-1]

    def consumers(self, value: str) -> list:
        out = []
        for op in self.ops:
            if isinstance(op, (SynapseOp, HeadOp, FireOp)) and op.src == value:
                out.append(op)
            elif isinstance(op, AttentionOp) and value in (op.q, op.k, op.v):
                out.append(op)
            elif isinstance(op, AddOp) and value in (op.a, op.b):
                out.append(op)
        return out

    def first_layer_macs(self) -> int:
        """Multiply-accumulates of the real-valued stem per sample and window."""
        op = self.ops[0]
        c, h, w = self.input_shape
        ho, wo = op.out_hw(h, w)
        cout, cin_g, k, _ = op.weight.shape
        return int(cout * cin_g * k * k * ho * wo)


class _Compiler:
    def __init__(self, model: Model):
        self.model = model
        self.ops: list = []

    def fire(self, sn: SpikingNeuron, name: str, src: str) -> str:
        self.ops.append(FireOp(name=name, src=src, v_th=float(sn.v_th)))
        return name

    def synapse(self, syn: Synapse, name: str, src: str, spiking: bool) -> str:
        p = {k: v.data.astype(np.float64) for k, v in syn.params.items()}
        w, b = fold_bn(p['weight'] * syn.in_scale, p['bias'], p['bn_gamma'], p['bn_beta'],
                       syn.buffers['running_mean'].astype(np.float64),
                       syn.buffers['running_var'].astype(np.float64))
        self.ops.append(SynapseOp(name=name, src=src, dst=name, weight=w, bias=b,
                                  stride=syn.stride, padding=syn.padding, groups=syn.groups,
                                  spiking=spiking))
        return name

    def add(self, a: str, b: str, dst: str) -> str:
        self.ops.append(AddOp(a, b, dst))
        return dst

    def sep(self, m: SpikeSepConv, path: str, u: str) -> str:
        if not m.mid_sn:
            raise ContractError(f'{path}: dw->pw2 without an SN is not spike-driven; cannot export')
        x = self.synapse(m.pw1, f'{path}.pw1', self.fire(m.sn1, f'{path}.sn1', u), True)
        x = self.synapse(m.dw, f'{path}.dw', self.fire(m.sn2, f'{path}.sn2', x), True)
        return self.synapse(m.pw2, f'{path}.pw2', self.fire(m.sn3, f'{path}.sn3', x), True)

    def two_layer(self, m, path: str, u: str, first: str, second: str) -> str:
        x = self.synapse(getattr(m, first), f'{path}.{first}', self.fire(m.sn1, f'{path}.sn1', u), True)
        return self.synapse(getattr(m, second), f'{path}.{second}', self.fire(m.sn2, f'{path}.sn2', x), True)

    def attention(self, m: ESDSA, path: str, u: str) -> str:
        s = self.fire(m.sn_in, f'{path}.sn_in', u)
        q = self.fire(m.sn_q, f'{path}.sn_q', self.synapse(m.q, f'{path}.q', s, True))
        k = self.fire(m.sn_k, f'{path}.sn_k', self.synapse(m.k, f'{path}.k', s, True))
        v = self.fire(m.sn_v, f'{path}.sn_v', self.synapse(m.v, f'{path}.v', s, True))
        self.ops.append(AttentionOp(name=f'{path}.qkv', q=q, k=k, v=v, heads=m.heads))
        a = self.fire(m.sn_attn, f'{path}.sn_attn', f'{path}.qkv')
        return self.synapse(m.proj, f'{path}.proj', a, True)

    def block(self, block, path: str, u: str) -> str:
        if isinstance(block, Downsample):
            src, spiking = u, False
            if block.sn is not None:
                src, spiking = self.fire(block.sn, f'{path}.sn', u), True
            return self.synapse(block.conv, f'{path}.conv', src, spiking)
        if isinstance(block, ConvBlock):
            u = self.add(u, self.sep(block.sep, f'{path}.sep', u), f'{path}.res_sep')
            return self.add(u, self.two_layer(block.mixer, f'{path}.mixer', u, 'conv1', 'conv2'),
                            f'{path}.res_mixer')
        if isinstance(block, TransformerBlock):
            if block.sep is not None:
                u = self.add(u, self.sep(block.sep, f'{path}.sep', u), f'{path}.res_sep')
            u = self.add(u, self.attention(block.attn, f'{path}.attn', u), f'{path}.res_attn')
            return self.add(u, self.two_layer(block.mlp, f'{path}.mlp', u, 'fc1', 'fc2'), f'{path}.res_mlp')
        raise ContractError(f'cannot export block {type(block).__name__} at {path}')

    def head(self, head: Head, src: str, hw: tuple[int, int]) -> None:
        w = head.params['weight'].data.astype(np.float64) * head.in_scale / (hw[0] * hw[1])
        b = head.params['bias'].data.astype(np.float64).reshape(-1)
        self.ops.append(HeadOp(name='head', src=src, weight=w, bias=b, pooled_hw=hw))

    def run(self) -> InferenceProgram:
        m = self.model
        u = self.block(m.stem, 'stem', INPUT)
        for name, child in m.children.items():
            if name.startswith('stages.'):
                u = self.block(child, name, u)
        s = self.fire(m.sn_out, 'sn_out', u)
        self.head(m.head, s, m.spec.resolutions()[-1])
        return InferenceProgram(ops=self.ops, neuron=m.spec.neuron,
                                input_shape=tuple(m.spec.input_shape), num_classes=m.spec.num_classes)


def compile_program(model: Model) -> InferenceProgram:
    program = _Compiler(model).run()
    logger.debug('compiled %d ops (%d spiking layers)', len(program.ops), len(program.fire_ops))
    return program


def as_program(model_or_program) -> InferenceProgram:
    if isinstance(model_or_program, InferenceProgram):
        return model_or_program
    return compile_program(model_or_program)

