"""
Training loops.

Static tasks train one window with integer activations (Fire_D forward,
rectangular surrogate backward). Dynamic tasks unroll T windows with the
neuron state carried between them and average the per-window loss. The
vanilla baseline repeats a static image over T frames with D = 1.

Evaluation runs the exported program in integer mode, the same path the
inference executors take, so reported accuracy is what `infer` reproduces.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from config import BATCH_SIZE, EPOCHS, QUEUE_BOUND_FACTOR
from src.checkpoint import Checkpoint
from src.datasets import EventFrames, LabeledImages
from src.errors import ConfigError, NonFiniteError
from src.executors import ExecutionMode, run_async, run_integer, run_sync
from src.model import Model
from src.optim import AdamW, AdamWHyper
from src.program import compile_program
from src.tensor import Tensor, cross_entropy

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'loss', 'train_accuracy', 'test_accuracy']


@dataclass
class TrainResult:
    model: Model
    history: pd.DataFrame
    checkpoint: Checkpoint

    @property
    def final_loss(self) -> float:
        return float(self.history['loss'].iloc[-1]) if len(self.history) else float('nan')


def repeat_frames(x: np.ndarray, t_steps: int) -> np.ndarray:
    """(N, C, H, W) -> (T, N, C, H, W) with the same image in every window."""
    return np.repeat(np.asarray(x)[None], t_steps, axis=0)


def model_inputs(model: Model, x: np.ndarray) -> np.ndarray:
    t = model.spec.neuron.t_steps
    if t > 1 and x.ndim == 4:
        return repeat_frames(x, t)
    return x


def predict(model: Model, x: np.ndarray, mode: ExecutionMode = ExecutionMode.INTEGER,
            batch_size: int = 256, seed: int = 0, program=None,
            queue_factor: float = QUEUE_BOUND_FACTOR) -> np.ndarray:
    """Logits of the exported program; x is (N, ...) static or (T, N, ...) framed."""
    program = program or compile_program(model)
    axis = 1 if x.ndim == 5 else 0
    out = []
    for start in range(0, x.shape[axis], batch_size):
        xb = x[:, start:start + batch_size] if axis else x[start:start + batch_size]
        xb = model_inputs(model, xb)
        if mode is ExecutionMode.INTEGER:
            out.append(run_integer(program, xb).logits)
        elif mode is ExecutionMode.SYNC_EXPANDED:
            out.append(run_sync(program, xb).logits)
        else:
            out.append(run_async(program, xb, seed=seed + start, queue_factor=queue_factor).logits)
    return np.concatenate(out)


def stacked_inputs(data: LabeledImages) -> np.ndarray:
    """Whole dataset as executor input: (N, C, H, W) or time-major (T, N, C, H, W)."""
    if isinstance(data, EventFrames):
        return np.ascontiguousarray(data.images.transpose(1, 0, 2, 3, 4))
    return data.images


def evaluate(model: Model, data: LabeledImages, mode: ExecutionMode = ExecutionMode.INTEGER,
             batch_size: int = 256, seed: int = 0) -> float:
    if not len(data):
        return float('nan')
    logits = predict(model, stacked_inputs(data), mode, batch_size, seed)
    return float((logits.argmax(axis=1) == data.labels).mean())


def _window_loss(model: Model, x: np.ndarray, labels: np.ndarray) -> Tensor:
    """CE of a single window, or the mean over windows for (T, N, ...) input."""
    if x.ndim == 4:
        return cross_entropy(model(Tensor(x)), labels)
    model.reset_state()
    total = None
    for xt in x:
        loss = cross_entropy(model(Tensor(xt)), labels)
        total = loss if total is None else total + loss
    return total * (1.0 / x.shape[0])


def _fit(model: Model, train: LabeledImages, hyper: AdamWHyper | None, epochs: int, batch_size: int,
         seed: int, test: LabeledImages | None, metadata: dict) -> TrainResult:
    rng = np.random.default_rng(seed)
    opt = AdamW(model.named_parameters(), hyper)
    last_good = Checkpoint.from_model(model, {**metadata, 'epoch': 0})
    rows = []
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        model.train()
        losses, sizes = [], []
        for xb, yb in train.batches(batch_size, rng):
            xb = model_inputs(model, xb)
            loss = _window_loss(model, xb, yb)
            value = float(loss.data)
            try:
                if not np.isfinite(value):
                    raise NonFiniteError(f'non-finite training loss {value} in epoch {epoch}')
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                exc.checkpoint = last_good
                logger.error('training diverged in epoch %d; last good checkpoint is epoch %d',
                             epoch, last_good.metadata['epoch'])
                raise
            finally:
                model.reset_state()
            losses.append(value)
            sizes.append(len(yb))
        model.eval()
        row = {'epoch': epoch, 'loss': float(np.average(losses, weights=sizes)),
               'train_accuracy': evaluate(model, train),
               'test_accuracy': evaluate(model, test) if test is not None else float('nan')}
        rows.append(row)
        last_good = Checkpoint.from_model(model, {**metadata, 'epoch': epoch, 'loss': row['loss'],
                                                  'test_accuracy': row['test_accuracy']})
        logger.info('epoch %d/%d: loss %.4f train acc %.3f test acc %.3f (%.1fs)', epoch, epochs,
                    row['loss'], row['train_accuracy'], row['test_accuracy'], time.perf_counter() - start)
    return TrainResult(model=model, history=pd.DataFrame(rows, columns=HISTORY_COLUMNS), checkpoint=last_good)


def train_static(model: Model, train: LabeledImages, hyper: AdamWHyper | None = None, epochs: int = EPOCHS,
                 batch_size: int = BATCH_SIZE, seed: int = 0, test: LabeledImages | None = None) -> TrainResult:
    if model.spec.neuron.t_steps != 1:
        raise ConfigError(f'static training runs one window, model has t_steps={model.spec.neuron.t_steps}')
    return _fit(model, train, hyper, epochs, batch_size, seed, test,
                {'task': 'classify_static', 'method': 'sfa', 'seed': seed})


def train_dynamic(model: Model, train: EventFrames, hyper: AdamWHyper | None = None, t_steps: int | None = None,
                  epochs: int = EPOCHS, batch_size: int = BATCH_SIZE, seed: int = 0,
                  test: EventFrames | None = None, method: str = 'sfa') -> TrainResult:
    """BPTT over T windows; state crosses windows through the configured boundary reset."""
    t = model.spec.neuron.t_steps if t_steps is None else t_steps
    if t < 2:
        raise ConfigError(f'dynamic training needs T >= 2, got {t}')
    if t != model.spec.neuron.t_steps:
        raise ConfigError(f'model was built for T={model.spec.neuron.t_steps}, asked to train T={t}')
    if train.images.ndim != 5 or train.images.shape[1] != t:
        raise ConfigError(f'expected per-sample frame stacks with {t} frames, got {train.images.shape}')
    return _fit(model, train, hyper, epochs, batch_size, seed, test,
                {'task': 'classify_dynamic', 'method': method, 'seed': seed})


def as_frames(data: LabeledImages, t_steps: int) -> EventFrames:
    return EventFrames(np.repeat(data.images[:, None], t_steps, axis=1), data.labels, data.num_classes)


def train_vanilla(model: Model, train: LabeledImages, hyper: AdamWHyper | None = None, t_steps: int = 4,
                  epochs: int = EPOCHS, batch_size: int = BATCH_SIZE, seed: int = 0,
                  test: LabeledImages | None = None) -> TrainResult:
    """Binary spikes (D = 1) on a static image repeated over T frames."""
    if model.spec.neuron.d_cap != 1:
        raise ConfigError(f'vanilla training uses binary spikes, model has D={model.spec.neuron.d_cap}')
    return train_dynamic(model, as_frames(train, t_steps), hyper, t_steps, epochs, batch_size, seed,
                         as_frames(test, t_steps) if test is not None else None, method='vanilla')
