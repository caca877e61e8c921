import numpy as np
import pandas as pd

from src.plots import plot_d_sweep, plot_nsfr, plot_pretraining, plot_spike_maps, plot_training


def test_figures_are_written(tmp_path):
    plot_nsfr({'sfa': np.array([0.4, 0.2, 0.1, 0.0]), 'vanilla': np.array([0.1, 0.1])}, tmp_path / 'nsfr.png',
              d_cap=2)
    plot_spike_maps(np.random.default_rng(0).uniform(size=(3, 4, 4)), tmp_path / 'maps.png', title='sn_out')
    plot_spike_maps(np.ones((1, 4, 4)), tmp_path / 'mean.png')
    history = pd.DataFrame({'epoch': [1, 2], 'loss': [1.0, 0.5], 'train_accuracy': [0.5, 0.8],
                            'test_accuracy': [np.nan, np.nan]})
    plot_training(history, tmp_path / 'training.png')
    plot_pretraining(pd.DataFrame({'step': [1, 2, 3], 'loss': [1.0, 0.9, 0.8],
                                   'effective_rank': [3.0, np.nan, 2.5]}), tmp_path / 'pre.png')
    plot_d_sweep(pd.DataFrame({'d_cap': [1, 2], 'accuracy_mean': [0.6, 0.7], 'accuracy_std': [np.nan, 0.02],
                               'energy_ratio': [1.0, 1.8]}), tmp_path / 'sweep.png')
    for name in ('nsfr', 'maps', 'mean', 'training', 'pre', 'sweep'):
        assert (tmp_path / f'{name}.png').stat().st_size > 0
