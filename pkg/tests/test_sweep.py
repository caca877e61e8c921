import numpy as np
import pandas as pd
import pytest

from src.datasets import make_blobs, moving_bar_frames
from src.experiment import evaluation_inputs, load_data
from src.settings import resolve
from src.sweep import SWEEP_COLUMNS, d_sweep_table, run_d_sweep


def runs(d_values, seeds, energy=lambda d: 1e-9 * d, accuracy=lambda d, s: 0.5 + 0.05 * d + 0.01 * s):
    rows = [{'d_cap': d, 'seed': s, 'accuracy': accuracy(d, s), 'final_loss': 0.1, 'total_sops': 100 * d,
             'energy_j': energy(d), 'mean_spikes_per_neuron': 0.2 * d, 'nsfr_sum': 0.2 * d}
            for d in d_values for s in seeds]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def test_table_is_relative_to_smallest_d():
    table = d_sweep_table(runs((4, 1, 2), (0, 1)))
    assert table['d_cap'].tolist() == [1, 2, 4]
    np.testing.assert_allclose(table['energy_ratio'], [1.0, 2.0, 4.0])
    np.testing.assert_allclose(table['accuracy_gain'], [0.0, 0.05, 0.15])
    np.testing.assert_allclose(table['accuracy_std'], np.std([0.0, 0.01], ddof=1))
    assert (table['runs'] == 2).all()


def test_energy_slope_is_least_squares_fit():
    table = d_sweep_table(runs((1, 2, 4, 8), (0,), energy=lambda d: 3e-9 * d + 1e-9))
    assert table['energy_slope'].iloc[0] == pytest.approx(3e-9)
    assert table['energy_r2'].iloc[0] == pytest.approx(1.0)


def test_single_d_has_no_slope():
    table = d_sweep_table(runs((4,), (0, 1)))
    assert np.isnan(table['energy_slope'].iloc[0])
    assert table['energy_ratio'].iloc[0] == 1.0


def test_evaluation_inputs_layouts():
    static = make_blobs(6, (1, 8, 8), seed=0)
    assert evaluation_inputs(static, 4).shape == (4, 1, 8, 8)
    assert evaluation_inputs(static, 4, t_steps=3).shape == (3, 4, 1, 8, 8)
    frames = moving_bar_frames(5, t_steps=2, seed=0, width=8, height=8)
    assert evaluation_inputs(frames, 3).shape == (2, 3, 2, 8, 8)


def test_load_data_checks_input_shape():
    cfg = resolve({'seed': '0', 'data.samples': '12', 'model.input_shape': '1,16,16',
                   'model.stages': 'conv:8:1', 'model.heads': '2'})
    train, test = load_data(cfg)
    assert len(train) + len(test) == 12
    assert train.images.shape[1:] == (1, 16, 16)
    cfg = resolve({'seed': '0', 'task': 'classify_dynamic', 'data.samples': '4',
                   'model.input_shape': '2,16,16', 'model.stages': 'conv:8:1'})
    train, _ = load_data(cfg)
    assert train.images.shape[1:] == (2, 2, 16, 16)


@pytest.mark.slow
def test_integer_activations_beat_binary_spikes():
    cfg = resolve({'seed': '0', 'model.stages': 'conv:8:1,transformer:16:1', 'model.heads': '2',
                   'train.epochs': '15', 'train.lr': '0.002', 'data.samples': '240', 'data.noise': '0.3',
                   'profile.samples': '16'})
    table = d_sweep_table(run_d_sweep(cfg, d_values=(1, 4), seeds=(0, 1, 2))).set_index('d_cap')
    assert table.loc[4, 'runs'] == 3
    assert table.loc[4, 'accuracy_gain'] >= 0.02
