"""
Experiment configuration: flat `key = value` files with dotted namespaces.

Defaults come from config.py (static tasks) or config_dynamic.py (event
tasks); the file overrides them and CLI flags override the file. The resolved
configuration is echoed to manifest.cfg in the same format.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import config as base
import config_dynamic as dynamic
from src.errors import ConfigError
from src.model import ModelSpec, parse_stages
from src.neuron import NeuronConfig
from src.optim import AdamWHyper
from src.profiler import EnergyModel

logger = logging.getLogger(__name__)

TASKS = ('classify_static', 'classify_dynamic', 'mim_pretrain')
DATA_SOURCES = ('blobs', 'idx', 'bars', 'events')
TRAIN_METHODS = ('sfa', 'vanilla')
_SECTION = 'experiment'


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(' ', '').split(',') if v)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


# key -> (parser, static default, dynamic default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any, Any]] = {
    'task': (str, 'classify_static', 'classify_dynamic'),
    'seed': (int, None, None),
    'out': (str, 'runs/default', 'runs/default'),
    'model.stages': (str, base.STAGES, base.STAGES),
    'model.input_shape': (_ints, base.INPUT_SHAPE, dynamic.INPUT_SHAPE),
    'model.num_classes': (int, base.NUM_CLASSES, dynamic.NUM_CLASSES),
    'model.heads': (int, base.HEADS, base.HEADS),
    'model.gamma': (float, base.GAMMA, base.GAMMA),
    'model.mlp_ratio': (float, base.MLP_RATIO, base.MLP_RATIO),
    'model.sep_ratio': (float, base.SEP_RATIO, base.SEP_RATIO),
    'model.kernel': (int, base.SEP_KERNEL, base.SEP_KERNEL),
    'neuron.d_cap': (int, base.D_CAP, dynamic.D_CAP_DYNAMIC),
    'neuron.beta': (float, base.BETA, dynamic.BETA),
    'neuron.v_th': (float, base.V_TH, dynamic.V_TH_DYNAMIC),
    'neuron.v_reset': (float, base.V_RESET, dynamic.V_RESET_DYNAMIC),
    'neuron.reset_mode': (str, base.RESET_MODE, dynamic.RESET_MODE),
    'neuron.t_steps': (int, base.T_STEPS, dynamic.T_STEPS),
    'train.method': (str, 'sfa', 'sfa'),
    'train.epochs': (int, base.EPOCHS, base.EPOCHS),
    'train.batch_size': (int, base.BATCH_SIZE, base.BATCH_SIZE),
    'train.lr': (float, base.LR, base.LR),
    'train.weight_decay': (float, base.WEIGHT_DECAY, base.WEIGHT_DECAY),
    'data.source': (str, 'blobs', 'bars'),
    'data.images': (str, '', ''),
    'data.labels': (str, '', ''),
    'data.events': (str, '', ''),
    'data.samples': (int, base.BLOB_SAMPLES, dynamic.BAR_SAMPLES),
    'data.noise': (float, base.BLOB_NOISE, base.BLOB_NOISE),
    'data.test_fraction': (float, base.TEST_FRACTION, base.TEST_FRACTION),
    'mim.patch': (int, base.PATCH_SIZE, base.PATCH_SIZE),
    'mim.ratio': (float, base.MASK_RATIO, base.MASK_RATIO),
    'mim.steps': (int, base.MIM_STEPS, base.MIM_STEPS),
    'mim.batch_size': (int, base.BATCH_SIZE, base.BATCH_SIZE),
    'mim.decoder_width': (int, base.DECODER_WIDTH, base.DECODER_WIDTH),
    'mim.decoder_depth': (int, base.DECODER_DEPTH, base.DECODER_DEPTH),
    'mim.decoder_heads': (int, base.DECODER_HEADS, base.DECODER_HEADS),
    'mim.rank_every': (int, base.RANK_EVERY, base.RANK_EVERY),
    'profile.e_ac': (float, base.E_AC, base.E_AC),
    'profile.e_mac': (float, base.E_MAC, base.E_MAC),
    'profile.samples': (int, 64, 64),
    'async.queue_factor': (float, base.QUEUE_BOUND_FACTOR, base.QUEUE_BOUND_FACTOR),
    'sweep.d_values': (_ints, (1, 2, 4), (1, 2, 4)),
    'sweep.seeds': (_ints, (0, 1, 2), (0, 1, 2)),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        v = self.values
        if v.get('seed') is None:
            raise ConfigError('seed is mandatory (set `seed = N` or pass --seed)')
        if v['task'] not in TASKS:
            raise ConfigError(f'task must be one of {TASKS}, got {v["task"]!r}')
        if v['data.source'] not in DATA_SOURCES:
            raise ConfigError(f'data.source must be one of {DATA_SOURCES}, got {v["data.source"]!r}')
        if v['train.method'] not in TRAIN_METHODS:
            raise ConfigError(f'train.method must be one of {TRAIN_METHODS}, got {v["train.method"]!r}')
        if not v['async.queue_factor'] > 0:
            raise ConfigError(f'async.queue_factor must be positive, got {v["async.queue_factor"]}')
        for key in self.data_paths():
            if not Path(v[key]).exists():
                raise ConfigError(f'{key} = {v[key]} does not exist')
        _ = self.model

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def task(self) -> str:
        return self.values['task']

    @property
    def seed(self) -> int:
        return self.values['seed']

    @property
    def out(self) -> Path:
        return Path(self.values['out'])

    @property
    def neuron(self) -> NeuronConfig:
        v = self.values
        return NeuronConfig(beta=v['neuron.beta'], v_th=v['neuron.v_th'], v_reset=v['neuron.v_reset'],
                            reset_mode=v['neuron.reset_mode'], d_cap=v['neuron.d_cap'],
                            t_steps=v['neuron.t_steps'])

    @property
    def model(self) -> ModelSpec:
        v = self.values
        stages = parse_stages(v['model.stages'], heads=v['model.heads'], gamma=v['model.gamma'],
                              mlp_ratio=v['model.mlp_ratio'], sep_ratio=v['model.sep_ratio'],
                              kernel=v['model.kernel'])
        shape = v['model.input_shape']
        if len(shape) != 3:
            raise ConfigError(f'model.input_shape needs C,H,W, got {shape}')
        return ModelSpec(stages=stages, input_shape=shape, num_classes=v['model.num_classes'],
                         neuron=self.neuron, seed=self.seed)

    @property
    def hyper(self) -> AdamWHyper:
        return AdamWHyper(lr=self.values['train.lr'], weight_decay=self.values['train.weight_decay'])

    @property
    def energy_model(self) -> EnergyModel:
        return EnergyModel(self.values['profile.e_ac'], self.values['profile.e_mac'])

    def data_paths(self) -> list[str]:
        source = self.values['data.source']
        if source == 'idx':
            return ['data.images', 'data.labels']
        if source == 'events':
            return ['data.events']
        return []

    def replace(self, **overrides) -> 'ExperimentConfig':
        """Keyword names use '__' for the namespace dot: replace(neuron__d_cap=1)."""
        values = dict(self.values)
        for key, value in overrides.items():
            name = key.replace('__', '.')
            if name not in SCHEMA:
                raise ConfigError(f'unknown configuration key {name!r}')
            values[name] = value
        return ExperimentConfig(values)

    def to_text(self) -> str:
        lines = ['# resolved experiment configuration']
        lines += [f'{key} = {_fmt(self.values[key])}' for key in SCHEMA]
        return '\n'.join(lines) + '\n'

    def write_manifest(self, out_dir=None) -> Path:
        path = Path(out_dir if out_dir is not None else self.out) / 'manifest.cfg'
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def parse_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=('#', ';'),
                                       inline_comment_prefixes=('#',))
    try:
        parser.read_string(f'[{_SECTION}]\n{text}')
    except configparser.Error as exc:
        raise ConfigError(f'unreadable configuration: {exc}') from exc
    raw = dict(parser[_SECTION])
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f'unknown configuration keys: {", ".join(unknown)}')
    return raw


def resolve(raw: dict[str, str], overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse raw strings over task defaults, then apply already-typed or string overrides."""
    merged: dict[str, Any] = dict(raw)
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f'unknown configuration key {key!r}')
        if value is not None:
            merged[key] = value
    task = str(merged.get('task', 'classify_static'))
    column = 2 if task == 'classify_dynamic' else 1
    values: dict[str, Any] = {}
    for key, entry in SCHEMA.items():
        convert, default = entry[0], entry[column]
        if key not in merged:
            values[key] = default
            continue
        value = merged[key]
        try:
            values[key] = convert(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f'{key}: {exc}') from exc
    if isinstance(values['model.input_shape'], list):
        values['model.input_shape'] = tuple(values['model.input_shape'])
    return ExperimentConfig(values)


def load_config(path=None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    raw: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f'no configuration file at {path}')
        raw = parse_text(path.read_text())
    cfg = resolve(raw, overrides)
    logger.debug('resolved configuration: task=%s seed=%d D=%d', cfg.task, cfg.seed, cfg['neuron.d_cap'])
    return cfg
