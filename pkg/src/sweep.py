"""Sensitivity of accuracy and energy to the activation cap D."""

from __future__ import annotations

import logging

import numpy as np
import pandas as pd
from scipy import stats

from src.engine import evaluate
from src.experiment import evaluation_inputs, load_data, train_from_config
from src.profiler import profile
from src.settings import ExperimentConfig

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['d_cap', 'seed', 'accuracy', 'final_loss', 'total_sops', 'energy_j',
                 'mean_spikes_per_neuron', 'nsfr_sum']


def run_d_sweep(cfg: ExperimentConfig, d_values=None, seeds=None) -> pd.DataFrame:
    """Train and profile one model per (D, seed); one row each."""
    d_values = tuple(d_values if d_values is not None else cfg['sweep.d_values'])
    seeds = tuple(seeds if seeds is not None else cfg['sweep.seeds'])
    rows = []
    for d_cap in d_values:
        for seed in seeds:
            run = cfg.replace(neuron__d_cap=int(d_cap), seed=int(seed))
            train, test = load_data(run)
            result = train_from_config(run, train=train, test=test)
            x = evaluation_inputs(test, run['profile.samples'], result.model.spec.neuron.t_steps)
            report = profile(result.model, x, em=run.energy_model, seed=run.seed,
                             queue_factor=run['async.queue_factor'])
            rows.append({'d_cap': int(d_cap), 'seed': int(seed),
                         'accuracy': evaluate(result.model, test),
                         'final_loss': result.final_loss,
                         'total_sops': report.total_sops,
                         'energy_j': report.energy_j,
                         'mean_spikes_per_neuron': report.mean_spikes_per_neuron,
                         'nsfr_sum': float(np.sum(report.nsfr))})
            logger.info('D=%d seed=%d: accuracy %.3f energy %.3e J', d_cap, seed,
                        rows[-1]['accuracy'], rows[-1]['energy_j'])
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def d_sweep_table(df: pd.DataFrame) -> pd.DataFrame:
    """
    Per D: mean/std accuracy, accuracy gain over D = 1 (or the smallest D),
    energy ratio against the smallest D. The least-squares slope of energy
    against D is attached to every row.
    """
    grouped = df.groupby('d_cap').agg(accuracy_mean=('accuracy', 'mean'), accuracy_std=('accuracy', 'std'),
                                      energy_mean=('energy_j', 'mean'),
                                      spikes_mean=('mean_spikes_per_neuron', 'mean'),
                                      runs=('seed', 'count')).reset_index()
    base = grouped.iloc[0]
    grouped['accuracy_gain'] = grouped['accuracy_mean'] - base['accuracy_mean']
    grouped['energy_ratio'] = grouped['energy_mean'] / base['energy_mean']
    if df['d_cap'].nunique() > 1:
        fit = stats.linregress(df['d_cap'].to_numpy(dtype=float), df['energy_j'].to_numpy(dtype=float))
        slope, r2 = fit.slope, fit.rvalue ** 2
    else:
        slope, r2 = np.nan, np.nan
    grouped['energy_slope'] = slope
    grouped['energy_r2'] = r2
    return grouped
