import struct

import numpy as np
import pytest

from src.datasets import (EVENT_DTYPE, EventFrames, LabeledImages, bin_events, load_event_dataset,
                          load_idx_dataset, make_blobs, make_moving_bars, moving_bar_frames, read_events,
                          read_idx, save_idx_dataset, write_event_dataset, write_events, write_idx)
from src.errors import ConfigError, ParseError


def events(*rows):
    out = np.zeros(len(rows), dtype=EVENT_DTYPE)
    for i, (t, x, y, p) in enumerate(rows):
        out[i] = (t, x, y, p)
    return out


@pytest.fixture
def idx_files(tmp_path):
    images = np.zeros((3, 4, 4), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 1, 1] = 128
    write_idx(tmp_path / 'images.idx', images)
    write_idx(tmp_path / 'labels.idx', np.array([0, 1, 2], dtype=np.uint8))
    return tmp_path / 'images.idx', tmp_path / 'labels.idx'


def test_idx_header_is_big_endian(idx_files):
    raw = idx_files[0].read_bytes()
    assert raw[:4] == b'\x00\x00\x08\x03'
    assert struct.unpack('>3I', raw[4:16]) == (3, 4, 4)


def test_load_idx_scales_to_unit_range(idx_files):
    data = load_idx_dataset(*idx_files)
    assert data.images.shape == (3, 1, 4, 4)
    assert data.images.dtype == np.float32
    assert data.images[0, 0, 0, 0] == 1.0
    assert data.images[1, 0, 1, 1] == pytest.approx(128 / 255)
    assert data.num_classes == 3


def test_idx_labels_magic_rejected_as_images(tmp_path, idx_files):
    write_idx(tmp_path / 'short.idx', np.zeros((2, 3), dtype=np.uint8))
    with pytest.raises(ParseError) as info:
        load_idx_dataset(tmp_path / 'short.idx', idx_files[1])
    assert '0x00000802' in str(info.value)


def test_idx_truncation_and_trailing_bytes(tmp_path, idx_files):
    raw = idx_files[0].read_bytes()
    (tmp_path / 'cut.idx').write_bytes(raw[:-1])
    with pytest.raises(ParseError, match='truncated IDX payload'):
        read_idx(tmp_path / 'cut.idx')
    (tmp_path / 'long.idx').write_bytes(raw + b'\x00')
    with pytest.raises(ParseError, match='trailing'):
        read_idx(tmp_path / 'long.idx')
    (tmp_path / 'bad.idx').write_bytes(b'\x01\x00\x08\x01' + raw[4:])
    with pytest.raises(ParseError, match='magic'):
        read_idx(tmp_path / 'bad.idx')


def test_idx_label_outside_classes(idx_files):
    with pytest.raises(ParseError):
        load_idx_dataset(*idx_files, num_classes=2)


def test_idx_round_trip(tmp_path):
    data = make_blobs(6, (1, 8, 8), seed=2)
    save_idx_dataset(data, tmp_path / 'i.idx', tmp_path / 'l.idx')
    back = load_idx_dataset(tmp_path / 'i.idx', tmp_path / 'l.idx', 3)
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_allclose(back.images, data.images, atol=0.5 / 255 + 1e-7)


def test_event_validation(tmp_path):
    write_events(tmp_path / 'bad.bin', events((0, 5, 0, 1)))
    with pytest.raises(ParseError, match='outside'):
        read_events(tmp_path / 'bad.bin', 4, 4)
    write_events(tmp_path / 'pol.bin', events((0, 0, 0, 2)))
    with pytest.raises(ParseError, match='polarity'):
        read_events(tmp_path / 'pol.bin', 4, 4)
    (tmp_path / 'cut.bin').write_bytes(b'\x00' * 17)
    with pytest.raises(ParseError) as info:
        read_events(tmp_path / 'cut.bin', 4, 4)
    assert info.value.offset == 16


def test_binning_slots():
    ev = events((0, 0, 0, 1), (49, 1, 0, 0), (50, 2, 0, 1), (99, 3, 0, 1), (100, 3, 1, 1))
    frames = bin_events(ev, t_steps=2, width=4, height=2, duration_us=100)
    assert frames.shape == (2, 2, 2, 4)
    assert frames[0, 1, 0, 0] > 0 and frames[0, 0, 0, 1] > 0
    assert frames[1, 1, 0, 2] > 0 and frames[1, 1, 0, 3] > 0
    assert frames[1, 1, 1, 3] > 0
    assert frames.sum() == pytest.approx(5 / 255)


def test_empty_event_file_gives_zero_frames(tmp_path):
    write_event_dataset(tmp_path, [events()], np.array([0]), width=4, height=4, duration_us=10)
    data = load_event_dataset(tmp_path, t_steps=3, num_classes=2)
    assert isinstance(data, EventFrames)
    assert data.images.shape == (1, 3, 2, 4, 4)
    assert not data.images.any()


def test_event_dataset_round_trip(tmp_path):
    samples, labels = make_moving_bars(4, seed=1, width=8, height=8)
    write_event_dataset(tmp_path, samples, labels, width=8, height=8)
    data = load_event_dataset(tmp_path, t_steps=2)
    direct = moving_bar_frames(4, t_steps=2, seed=1, width=8, height=8)
    np.testing.assert_array_equal(data.images, direct.images)
    np.testing.assert_array_equal(data.labels, direct.labels)


def test_moving_bar_total_histogram_is_direction_free():
    samples, labels = make_moving_bars(2, seed=0, width=8, height=8)
    left = samples[int(np.argmax(labels == 1))]
    right = samples[int(np.argmax(labels == 0))]
    assert np.array_equal(np.bincount(left['x'], minlength=8), np.bincount(right['x'], minlength=8))
    frames = moving_bar_frames(2, t_steps=2, seed=0, width=8, height=8).images
    assert not np.array_equal(frames[0, 0], frames[1, 0])


def test_event_batches_are_time_major():
    frames = EventFrames(np.zeros((5, 3, 2, 4, 4), dtype=np.float32), np.zeros(5, dtype=np.int64), 2)
    xb, yb = next(frames.batches(4))
    assert xb.shape == (3, 4, 2, 4, 4) and len(yb) == 4


def test_split_is_disjoint_and_seeded():
    data = make_blobs(20, (1, 8, 8), seed=0)
    train, test = data.split(0.25, seed=3)
    assert len(train) == 15 and len(test) == 5
    again, _ = data.split(0.25, seed=3)
    np.testing.assert_array_equal(train.labels, again.labels)


def test_labeled_images_validation():
    with pytest.raises(ConfigError):
        LabeledImages(np.zeros((2, 1, 4, 4)), np.array([0]), 2)
    with pytest.raises(ConfigError):
        LabeledImages(np.zeros((1, 1, 4, 4)), np.array([2]), 2)


def test_blobs_are_in_unit_range_and_balanced():
    data = make_blobs(30, (1, 16, 16), seed=0)
    assert data.images.min() >= 0 and data.images.max() <= 1
    assert np.bincount(data.labels).tolist() == [10, 10, 10]
