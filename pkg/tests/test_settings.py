from pathlib import Path

import pytest

from src.errors import ConfigError
from src.settings import SCHEMA, load_config, parse_text, resolve

CONFIGS = Path(__file__).resolve().parent.parent / 'configs'


def test_seed_is_mandatory():
    with pytest.raises(ConfigError, match='seed'):
        resolve({})
    assert resolve({}, {'seed': 7}).seed == 7


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match='neuron.dcap'):
        parse_text('seed = 0\nneuron.dcap = 4\n')
    with pytest.raises(ConfigError):
        resolve({'seed': '0'}, {'neuron.bogus': 1})


def test_bad_values():
    with pytest.raises(ConfigError):
        resolve({'seed': '0', 'neuron.d_cap': 'four'})
    with pytest.raises(ConfigError):
        resolve({'seed': '0', 'task': 'segment'})
    with pytest.raises(ConfigError):
        resolve({'seed': '0', 'neuron.reset_mode': 'sometimes'})
    with pytest.raises(ConfigError):
        resolve({'seed': '0', 'data.source': 'idx', 'data.images': '/nonexistent/images.idx',
                 'data.labels': '/nonexistent/labels.idx'})
    with pytest.raises(ConfigError, match='queue_factor'):
        resolve({'seed': '0', 'async.queue_factor': '0'})


def test_task_selects_defaults():
    static = resolve({'seed': '0'})
    dynamic = resolve({'seed': '0', 'task': 'classify_dynamic'})
    assert static['neuron.t_steps'] == 1 and static['neuron.reset_mode'] == 'soft'
    assert dynamic['neuron.t_steps'] == 2 and dynamic['neuron.reset_mode'] == 'hard'
    assert dynamic['neuron.beta'] == 0.5 and dynamic['data.source'] == 'bars'


def test_overrides_beat_file_and_none_is_ignored():
    cfg = resolve({'seed': '0', 'neuron.d_cap': '4'}, {'neuron.d_cap': 8, 'out': None})
    assert cfg['neuron.d_cap'] == 8
    assert cfg.model.neuron.d_cap == 8
    assert str(cfg.out) == SCHEMA['out'][1]


def test_inline_comments_and_lists():
    raw = parse_text('seed = 3  # run seed\nsweep.d_values = 1, 2, 8\nmodel.input_shape = 2,8,8\n')
    cfg = resolve(raw)
    assert cfg['sweep.d_values'] == (1, 2, 8)
    assert cfg['model.input_shape'] == (2, 8, 8)


def test_manifest_round_trip(tmp_path):
    cfg = load_config(CONFIGS / 'toy.cfg', {'out': str(tmp_path)})
    path = cfg.write_manifest()
    assert path == tmp_path / 'manifest.cfg'
    again = load_config(path)
    assert again.values == cfg.values


def test_replace_uses_double_underscore():
    cfg = resolve({'seed': '0'})
    changed = cfg.replace(neuron__d_cap=1, seed=5)
    assert changed['neuron.d_cap'] == 1 and changed.seed == 5
    assert cfg['neuron.d_cap'] == 4
    with pytest.raises(ConfigError):
        cfg.replace(neuron__nothing=1)


@pytest.mark.parametrize('name', ['toy.cfg', 'vanilla.cfg', 'dynamic.cfg', 'mim.cfg', 'sweep.cfg'])
def test_shipped_configs_resolve(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.model.input_shape == cfg['model.input_shape']
    assert cfg.energy_model.e_ac == pytest.approx(0.9e-12)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config('/nonexistent/experiment.cfg')
