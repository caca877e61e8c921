"""
Dataset ingestion and synthetic generators.

IDX files: big-endian header (two zero bytes, type code 0x08, rank), rank
u32 dimension sizes, then raw unsigned bytes.
Event files: little-endian u32 quadruples (t_us, x, y, polarity), one file per
sample, listed with labels in index.csv.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from config import BLOB_NOISE, BLOB_SAMPLES, INPUT_SHAPE, NUM_CLASSES, TEST_FRACTION
from config_dynamic import (BAR_SAMPLES, BAR_WIDTH, DURATION_US, EVENTS_PER_COLUMN, FRAME_CLIP, FRAME_SCALE,
                            SENSOR_HEIGHT, SENSOR_WIDTH)
from src.errors import ConfigError, ParseError

logger = logging.getLogger(__name__)

IDX_IMAGES = (0x00000803, 0x00000804)  # (N, H, W) or (N, C, H, W)
IDX_LABELS = 0x00000801
EVENT_DTYPE = np.dtype([('t', '<u4'), ('x', '<u4'), ('y', '<u4'), ('p', '<u4')])
INDEX_COLUMNS = ['file', 'label', 'width', 'height', 'duration_us']


@dataclass
class LabeledImages:
    images: np.ndarray   # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray   # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f'{len(self.images)} images but {len(self.labels)} labels')
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f'labels outside [0, {self.num_classes})')

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> 'LabeledImages':
        return type(self)(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, test_fraction: float = TEST_FRACTION, seed: int = 0) -> tuple['LabeledImages', 'LabeledImages']:
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(len(self) * test_fraction))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None
                ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Shuffled when rng is given; the last batch may be short."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


@dataclass
class EventFrames(LabeledImages):
    """images holds per-sample frame stacks (N, T, 2, H, W); batches come out time-major."""

    def batches(self, batch_size: int, rng: np.random.Generator | None = None
                ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for frames, labels in super().batches(batch_size, rng):
            yield np.ascontiguousarray(frames.transpose(1, 0, 2, 3, 4)), labels


# IDX

def read_idx(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4:
        raise ParseError('truncated IDX header', len(data), path)
    zero, dtype_code, rank = struct.unpack_from('>HBB', data, 0)
    if zero != 0 or dtype_code != 0x08:
        raise ParseError(f'bad IDX magic 0x{struct.unpack_from(">I", data, 0)[0]:08x}', 0, path)
    header = 4 + 4 * rank
    if len(data) < header:
        raise ParseError('truncated IDX dimension table', len(data), path)
    shape = struct.unpack_from(f'>{rank}I', data, 4)
    expected = header + int(np.prod(shape, dtype=np.int64))
    if len(data) < expected:
        raise ParseError(f'truncated IDX payload: need {expected} bytes, have {len(data)}', len(data), path)
    if len(data) > expected:
        raise ParseError('trailing bytes after IDX payload', expected, path)
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ConfigError(f'IDX writer takes uint8 arrays, got {array.dtype}')
    header = struct.pack('>HBB', 0, 0x08, array.ndim) + struct.pack(f'>{array.ndim}I', *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def _expect_magic(path, allowed: tuple[int, ...]) -> None:
    head = Path(path).read_bytes()[:4]
    if len(head) < 4:
        raise ParseError('truncated IDX header', len(head), path)
    found = struct.unpack('>I', head)[0]
    if found not in allowed:
        raise ParseError(f'unexpected IDX magic 0x{found:08x}', 0, path)


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None) -> LabeledImages:
    """uint8 images (N, H, W) or (N, C, H, W) scaled by 1/255; labels checked against num_classes."""
    _expect_magic(images_path, IDX_IMAGES)
    _expect_magic(labels_path, (IDX_LABELS,))
    raw = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    images = raw[:, None] if raw.ndim == 3 else raw
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    if len(labels) and labels.max() >= k:
        raise ParseError(f'label {labels.max()} outside {k} classes', 8 + int(np.argmax(labels >= k)), labels_path)
    logger.info('loaded %d IDX images of shape %s', len(labels), images.shape[1:])
    return LabeledImages((images.astype(np.float32) / 255.0), labels, k)


def save_idx_dataset(data: LabeledImages, images_path, labels_path) -> None:
    images = np.clip(np.floor(data.images * 255 + 0.5), 0, 255).astype(np.uint8)
    write_idx(images_path, images[:, 0] if images.shape[1] == 1 else images)
    write_idx(labels_path, data.labels.astype(np.uint8))


# events

def read_events(path, width: int, height: int) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) % EVENT_DTYPE.itemsize:
        last = len(data) - len(data) % EVENT_DTYPE.itemsize
        raise ParseError('truncated event record', last, path)
    events = np.frombuffer(data, dtype=EVENT_DTYPE)
    bad = (events['x'] >= width) | (events['y'] >= height)
    if bad.any():
        i = int(np.argmax(bad))
        raise ParseError(f'event ({events["x"][i]}, {events["y"][i]}) outside {width}x{height} sensor',
                         i * EVENT_DTYPE.itemsize, path)
    if (events['p'] > 1).any():
        i = int(np.argmax(events['p'] > 1))
        raise ParseError(f'polarity {events["p"][i]} not in {{0, 1}}', i * EVENT_DTYPE.itemsize, path)
    return events


def write_events(path, events: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(events, dtype=EVENT_DTYPE).tobytes())


def bin_events(events: np.ndarray, t_steps: int, width: int, height: int,
               duration_us: int) -> np.ndarray:
    """Uniform time slices, left-inclusive; per-polarity counts clipped then scaled: (T, 2, H, W)."""
    frames = np.zeros((t_steps, 2, height, width), dtype=np.float64)
    if len(events):
        t = events['t'].astype(np.int64)
        slot = np.minimum(t * t_steps // duration_us, t_steps - 1)
        np.add.at(frames, (slot, events['p'].astype(np.int64), events['y'].astype(np.int64),
                           events['x'].astype(np.int64)), 1.0)
    return (np.minimum(frames, FRAME_CLIP) * FRAME_SCALE).astype(np.float32)


def load_event_dataset(root, t_steps: int, num_classes: int | None = None) -> EventFrames:
    root = Path(root)
    index = pd.read_csv(root / 'index.csv')
    missing = set(INDEX_COLUMNS) - set(index.columns)
    if missing:
        raise ParseError(f'index.csv lacks columns {sorted(missing)}', None, root / 'index.csv')
    frames = [bin_events(read_events(root / row.file, int(row.width), int(row.height)), t_steps,
                         int(row.width), int(row.height), int(row.duration_us))
              for row in index.itertuples(index=False)]
    labels = index['label'].to_numpy(dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    logger.info('loaded %d event samples into %d frames each', len(labels), t_steps)
    return EventFrames(np.stack(frames), labels, k)


def write_event_dataset(root, samples: list[np.ndarray], labels: np.ndarray, width: int = SENSOR_WIDTH,
                        height: int = SENSOR_HEIGHT, duration_us: int = DURATION_US) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (events, label) in enumerate(zip(samples, labels)):
        name = f'sample_{i:05d}.bin'
        write_events(root / name, events)
        rows.append({'file': name, 'label': int(label), 'width': width, 'height': height,
                     'duration_us': duration_us})
    pd.DataFrame(rows, columns=INDEX_COLUMNS).to_csv(root / 'index.csv', index=False)


# synthetic data

def make_blobs(n: int = BLOB_SAMPLES, shape: tuple = INPUT_SHAPE, noise: float = BLOB_NOISE,
               seed: int = 0) -> LabeledImages:
    """Three classes of Gaussian blobs at random positions: horizontal, vertical, round."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    sigmas = {0: (0.08, 0.25), 1: (0.25, 0.08), 2: (0.14, 0.14)}
    labels = rng.permutation(np.arange(n) % NUM_CLASSES).astype(np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    images = np.empty((n, c, h, w), dtype=np.float32)
    for i, label in enumerate(labels):
        sy, sx = sigmas[int(label)][0] * h, sigmas[int(label)][1] * w
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        blob = np.exp(-0.5 * (((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2))
        img = blob[None] + noise * rng.standard_normal((c, h, w))
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledImages(images, labels, NUM_CLASSES)


def moving_bar_events(direction: int, rng: np.random.Generator, width: int = SENSOR_WIDTH,
                      height: int = SENSOR_HEIGHT, duration_us: int = DURATION_US,
                      bar_width: int = BAR_WIDTH, per_column: int = EVENTS_PER_COLUMN) -> np.ndarray:
    """
    A bar sweeping across and off the sensor: ON events at the leading edge,
    OFF at the trailing edge. direction 0 moves right, 1 moves left. Every
    column sees both polarities once, so the whole-recording histogram is
    direction-free.
    """
    slots = width + bar_width
    slot_us = duration_us // slots
    rows = []
    for k in range(slots):
        for col, pol in ((k, 1), (k - bar_width, 0)):
            if not 0 <= col < width:
                continue
            x = col if direction == 0 else width - 1 - col
            t = k * slot_us + rng.integers(0, slot_us, per_column)
            ev = np.zeros(per_column, dtype=EVENT_DTYPE)
            ev['t'], ev['x'], ev['y'], ev['p'] = t, x, rng.integers(0, height, per_column), pol
            rows.append(ev)
    events = np.concatenate(rows)
    return events[np.argsort(events['t'], kind='stable')]


def make_moving_bars(n: int = BAR_SAMPLES, seed: int = 0, **kwargs) -> tuple[list[np.ndarray], np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    return [moving_bar_events(int(label), rng, **kwargs) for label in labels], labels


def moving_bar_frames(n: int = BAR_SAMPLES, t_steps: int = 2, seed: int = 0,
                      width: int = SENSOR_WIDTH, height: int = SENSOR_HEIGHT,
                      duration_us: int = DURATION_US) -> EventFrames:
    samples, labels = make_moving_bars(n, seed, width=width, height=height, duration_us=duration_us)
    frames = np.stack([bin_events(ev, t_steps, width, height, duration_us) for ev in samples])
    return EventFrames(frames, labels, 2)
