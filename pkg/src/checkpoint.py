"""
Checkpoint archive.

    b"SFASNN" | u16 version | u32 header length | JSON header | payload

All integers little-endian. The header carries the ModelSpec (with its
NeuronConfig), free-form metadata and a tensor table of
(name, shape, dtype, offset, nbytes) into the little-endian payload.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from src.errors import CheckpointError
from src.layers import Module
from src.model import BlockSpec, Model, ModelSpec, build_model
from src.neuron import NeuronConfig

logger = logging.getLogger(__name__)

MAGIC = b'SFASNN'
VERSION = 1
_PREFIX = struct.Struct('<6sHI')


def spec_to_dict(spec: ModelSpec) -> dict:
    return {'stages': [[asdict(b) for b in stage] for stage in spec.stages],
            'input_shape': list(spec.input_shape), 'num_classes': spec.num_classes,
            'neuron': asdict(spec.neuron), 'seed': spec.seed}


def spec_from_dict(d: dict) -> ModelSpec:
    try:
        stages = tuple(tuple(BlockSpec(**b) for b in stage) for stage in d['stages'])
        return ModelSpec(stages=stages, input_shape=tuple(d['input_shape']), num_classes=d['num_classes'],
                         neuron=NeuronConfig(**d['neuron']), seed=d['seed'])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f'malformed model spec in checkpoint: {exc}') from exc


def model_state(model: Module) -> dict[str, np.ndarray]:
    state = {f'param:{k}': p.data for k, p in model.named_parameters().items()}
    state.update({f'buffer:{k}': b for k, b in model.named_buffers().items()})
    return state


def load_state(model: Module, tensors: dict[str, np.ndarray]) -> None:
    """Copy tensors into the model; names and shapes must match exactly."""
    params, buffers = model.named_parameters(), model.named_buffers()
    expected = {f'param:{k}' for k in params} | {f'buffer:{k}' for k in buffers}
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise CheckpointError(f'tensor names differ: missing {missing[:3]}, unexpected {extra[:3]}')
    for key, value in tensors.items():
        kind, name = key.split(':', 1)
        target = params[name].data if kind == 'param' else buffers[name]
        if target.shape != value.shape:
            raise CheckpointError(f'{name}: shape {value.shape} != model {target.shape}')
        if kind == 'param':
            params[name].data = value.astype(target.dtype, copy=True)
        else:
            target[...] = value


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, metadata: dict | None = None) -> 'Checkpoint':
        return cls(model.spec, {k: v.copy() for k, v in model_state(model).items()}, dict(metadata or {}))

    def build(self, sparse: bool = False) -> Model:
        model = build_model(self.spec, sparse=sparse)
        load_state(model, self.tensors)
        return model.eval()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    table, chunks, offset = [], [], 0
    for name, array in ckpt.tensors.items():
        array = np.ascontiguousarray(array)
        data = array.astype(array.dtype.newbyteorder('<'), copy=False).tobytes()
        table.append({'name': name, 'shape': list(array.shape), 'dtype': array.dtype.newbyteorder('<').str,
                      'offset': offset, 'nbytes': len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({'spec': spec_to_dict(ckpt.spec), 'metadata': ckpt.metadata, 'tensors': table},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_PREFIX.pack(MAGIC, VERSION, len(header)) + header + b''.join(chunks))
    logger.info('saved checkpoint %s (%d tensors, %d bytes payload)', path, len(table), offset)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f'no checkpoint at {path}')
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f'{path}: truncated archive prefix')
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f'{path}: bad magic {magic!r}')
    if version != VERSION:
        raise CheckpointError(f'{path}: format version {version}, this build reads {VERSION}')
    start = _PREFIX.size + header_len
    if len(raw) < start:
        raise CheckpointError(f'{path}: truncated header')
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except ValueError as exc:
        raise CheckpointError(f'{path}: unreadable header: {exc}') from exc
    payload = memoryview(raw)[start:]
    tensors = {}
    for entry in header['tensors']:
        end = entry['offset'] + entry['nbytes']
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of payload")
        array = np.frombuffer(payload[entry['offset']:end], dtype=np.dtype(entry['dtype']))
        tensors[entry['name']] = array.reshape(entry['shape']).astype(array.dtype.newbyteorder('='))
    return Checkpoint(spec_from_dict(header['spec']), tensors, header.get('metadata', {}))
