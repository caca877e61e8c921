import struct

import numpy as np
import pytest

from src.checkpoint import (MAGIC, VERSION, Checkpoint, load_checkpoint, load_state, model_state,
                            save_checkpoint, spec_from_dict, spec_to_dict)
from src.errors import CheckpointError
from src.executors import run_integer
from src.model import build_model
from tests.conftest import tiny_spec


@pytest.fixture
def saved(model, tmp_path):
    path = tmp_path / 'model.sfasnn'
    save_checkpoint(path, Checkpoint.from_model(model, {'epoch': 3, 'note': 'toy'}))
    return path


def test_round_trip_is_bit_exact(model, saved):
    ckpt = load_checkpoint(saved)
    assert ckpt.spec == model.spec
    assert ckpt.metadata == {'epoch': 3, 'note': 'toy'}
    original = model_state(model)
    assert set(ckpt.tensors) == set(original)
    for name, array in original.items():
        assert ckpt.tensors[name].dtype == array.dtype
        np.testing.assert_array_equal(ckpt.tensors[name], array)


def test_rebuilt_model_infers_identically(model, saved, images):
    rebuilt = load_checkpoint(saved).build()
    assert not rebuilt.training
    np.testing.assert_array_equal(run_integer(rebuilt, images).logits, run_integer(model, images).logits)


def test_prefix_layout(saved):
    raw = saved.read_bytes()
    magic, version, header_len = struct.unpack_from('<6sHI', raw)
    assert (magic, version) == (MAGIC, VERSION)
    assert raw[12:12 + header_len].startswith(b'{')


def test_spec_dict_round_trip():
    spec = tiny_spec(d_cap=8, t_steps=2, beta=0.5, reset_mode='hard')
    assert spec_from_dict(spec_to_dict(spec)) == spec
    with pytest.raises(CheckpointError):
        spec_from_dict({'stages': []})


def test_bad_magic(saved):
    raw = bytearray(saved.read_bytes())
    raw[:6] = b'NOTSNN'
    saved.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match='magic'):
        load_checkpoint(saved)


def test_unknown_version(saved):
    raw = bytearray(saved.read_bytes())
    raw[6:8] = struct.pack('<H', VERSION + 1)
    saved.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match='version'):
        load_checkpoint(saved)


@pytest.mark.parametrize('keep', [4, 40, -8])
def test_truncation(saved, keep):
    raw = saved.read_bytes()
    saved.write_bytes(raw[:keep])
    with pytest.raises(CheckpointError, match='truncated|past end'):
        load_checkpoint(saved)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'none.sfasnn')


def test_state_must_match_architecture(model):
    other = build_model(tiny_spec(d_cap=2))
    state = model_state(model)
    load_state(other, state)
    state.pop(next(iter(state)))
    with pytest.raises(CheckpointError, match='missing'):
        load_state(other, state)
