"""Glue between ExperimentConfig and the data, training and MIM modules."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.datasets import (LabeledImages, load_event_dataset, load_idx_dataset, make_blobs,
                          moving_bar_frames)
from src.engine import TrainResult, repeat_frames, train_dynamic, train_static, train_vanilla
from src.errors import ConfigError
from src.mim import build_decoder, build_encoder, finetune_convert, pretrain_mim
from src.model import Model, build_model
from src.settings import ExperimentConfig

logger = logging.getLogger(__name__)


def load_data(cfg: ExperimentConfig) -> tuple[LabeledImages, LabeledImages]:
    """Train / test split of the configured source, split with the run seed."""
    source = cfg['data.source']
    c, h, w = cfg['model.input_shape']
    t_steps = cfg['neuron.t_steps']
    if source == 'blobs':
        data = make_blobs(cfg['data.samples'], (c, h, w), cfg['data.noise'], seed=cfg.seed)
    elif source == 'idx':
        data = load_idx_dataset(cfg['data.images'], cfg['data.labels'], cfg['model.num_classes'])
    elif source == 'bars':
        data = moving_bar_frames(cfg['data.samples'], t_steps, seed=cfg.seed, width=w, height=h)
    else:
        data = load_event_dataset(cfg['data.events'], t_steps, cfg['model.num_classes'])
    shape = data.images.shape[-3:]
    if tuple(shape) != (c, h, w):
        raise ConfigError(f'{source} data has sample shape {tuple(shape)}, model.input_shape is {(c, h, w)}')
    train, test = data.split(cfg['data.test_fraction'], seed=cfg.seed)
    logger.info('data %s: %d train / %d test samples', source, len(train), len(test))
    return train, test


def train_from_config(cfg: ExperimentConfig, model: Model | None = None,
                      train: LabeledImages | None = None, test: LabeledImages | None = None) -> TrainResult:
    if train is None:
        train, test = load_data(cfg)
    model = model if model is not None else build_model(cfg.model)
    kwargs = dict(hyper=cfg.hyper, epochs=cfg['train.epochs'], batch_size=cfg['train.batch_size'],
                  seed=cfg.seed, test=test)
    if cfg['train.method'] == 'vanilla':
        if train.images.ndim == 5:
            return train_dynamic(model, train, method='vanilla', **kwargs)
        return train_vanilla(model, train, t_steps=cfg['neuron.t_steps'], **kwargs)
    if cfg.task == 'classify_dynamic':
        return train_dynamic(model, train, **kwargs)
    return train_static(model, train, **kwargs)


@dataclass
class PretrainResult:
    encoder: Model
    history: pd.DataFrame


def pretrain_from_config(cfg: ExperimentConfig) -> PretrainResult:
    """Masked pretraining on the training images; held-out images track effective rank."""
    train, test = load_data(cfg)
    if train.images.ndim != 4:
        raise ConfigError('masked pretraining needs static images')
    spec = cfg.model
    encoder = build_encoder(spec, cfg['mim.patch'])
    decoder = build_decoder(spec, cfg['mim.patch'], width=cfg['mim.decoder_width'],
                            depth=cfg['mim.decoder_depth'], heads=cfg['mim.decoder_heads'])
    heldout = test.images if len(test) else train.images[:cfg['mim.batch_size']]
    history = pretrain_mim(encoder, decoder, train.images, heldout, steps=cfg['mim.steps'],
                           batch_size=cfg['mim.batch_size'], patch=cfg['mim.patch'], mu=cfg['mim.ratio'],
                           hyper=cfg.hyper, seed=cfg.seed, rank_every=cfg['mim.rank_every'])
    return PretrainResult(encoder, history)


def finetune_from_config(cfg: ExperimentConfig, encoder: Model) -> TrainResult:
    """Swap sparse convolutions for vanilla ones and train the classifier end to end."""
    if encoder.spec.input_shape != tuple(cfg['model.input_shape']):
        raise ConfigError(f'encoder input {encoder.spec.input_shape} does not match the configuration')
    model = finetune_convert(encoder)
    model.train()
    return train_from_config(cfg, model=model)


def evaluation_inputs(test: LabeledImages, limit: int, t_steps: int = 1) -> np.ndarray:
    """First `limit` test samples in executor layout; static images repeat over t_steps windows."""
    images = test.images[:limit]
    if images.ndim == 5:
        return np.ascontiguousarray(images.transpose(1, 0, 2, 3, 4))
    return repeat_frames(images, t_steps) if t_steps > 1 else images
