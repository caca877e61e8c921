"""
Command-line entry point: python -m src.cli <command> [options].

Every command writes manifest.cfg (the resolved configuration) into --out
next to its data files. Domain failures exit 1, usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from src.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.engine import TrainResult, predict, stacked_inputs
from src.errors import CheckpointError, EquivalenceError, NonFiniteError, SNNError
from src.executors import ExecutionMode, equivalence_report, run_async, run_sync, write_trace
from src.experiment import (evaluation_inputs, finetune_from_config, load_data, pretrain_from_config,
                            train_from_config)
from src.model import Model, build_model
from src.profiler import export_spike_map, nsfr_series, profile
from src.settings import ExperimentConfig, load_config
from src.sweep import d_sweep_table, run_d_sweep

logger = logging.getLogger('src.cli')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
CHECKPOINT_NAME = 'model.sfasnn'


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n')


def _model_for(args, cfg: ExperimentConfig) -> Model:
    """The checkpoint given with --checkpoint, else a fresh model from the configuration."""
    if args.checkpoint is None:
        logger.info('no checkpoint given: using a freshly initialized model (seed %d)', cfg.seed)
        return build_model(cfg.model).eval()
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.spec.neuron.d_cap != cfg['neuron.d_cap']:
        logger.warning('checkpoint was trained with D=%d; configuration says D=%d, using the checkpoint',
                       ckpt.spec.neuron.d_cap, cfg['neuron.d_cap'])
    return ckpt.build()


def _finish_training(args, cfg: ExperimentConfig, result: TrainResult, out: Path) -> dict:
    save_checkpoint(out / CHECKPOINT_NAME, result.checkpoint)
    result.history.to_csv(out / 'history.csv', index=False)
    last = result.history.iloc[-1] if len(result.history) else {}
    summary = {'task': cfg.task, 'method': cfg['train.method'], 'seed': cfg.seed,
               'd_cap': result.model.spec.neuron.d_cap, 't_steps': result.model.spec.neuron.t_steps,
               'epochs': int(len(result.history)), 'final_loss': result.final_loss,
               'train_accuracy': float(last.get('train_accuracy', np.nan)),
               'test_accuracy': float(last.get('test_accuracy', np.nan))}
    _write_json(out / 'summary.json', summary)
    if args.figures:
        from src.plots import plot_training
        plot_training(result.history, out / 'training.png')
    return summary


def _guard_divergence(out: Path, train_fn):
    try:
        return train_fn()
    except NonFiniteError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(out / 'last_good.sfasnn', exc.checkpoint)
        raise


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    result = _guard_divergence(out, lambda: train_from_config(cfg))
    summary = _finish_training(args, cfg, result, out)
    logger.info('trained: loss %.4f, test accuracy %.3f', summary['final_loss'], summary['test_accuracy'])
    return 0


def cmd_pretrain_mim(args, cfg: ExperimentConfig, out: Path) -> int:
    result = pretrain_from_config(cfg)
    save_checkpoint(out / CHECKPOINT_NAME, Checkpoint.from_model(
        result.encoder, {'task': 'mim_pretrain', 'seed': cfg.seed, 'steps': cfg['mim.steps']}))
    result.history.to_csv(out / 'pretrain.csv', index=False)
    ranks = result.history['effective_rank'].dropna()
    _write_json(out / 'summary.json', {
        'task': 'mim_pretrain', 'seed': cfg.seed, 'd_cap': cfg['neuron.d_cap'], 'steps': cfg['mim.steps'],
        'final_loss': float(result.history['loss'].iloc[-1]),
        'first_effective_rank': float(ranks.iloc[0]), 'final_effective_rank': float(ranks.iloc[-1])})
    if args.figures:
        from src.plots import plot_pretraining
        plot_pretraining(result.history, out / 'pretraining.png')
    return 0


def cmd_finetune(args, cfg: ExperimentConfig, out: Path) -> int:
    if args.checkpoint is None:
        raise CheckpointError('finetune needs --checkpoint of a pretrained encoder')
    encoder = load_checkpoint(args.checkpoint).build(sparse=True)
    result = _guard_divergence(out, lambda: finetune_from_config(cfg, encoder))
    _finish_training(args, cfg, result, out)
    return 0


def cmd_infer(args, cfg: ExperimentConfig, out: Path) -> int:
    model = _model_for(args, cfg)
    _, test = load_data(cfg)
    mode = ExecutionMode.parse(args.mode)
    logits = predict(model, stacked_inputs(test), mode, seed=cfg.seed,
                     queue_factor=cfg['async.queue_factor'])
    preds = logits.argmax(axis=1)
    pd.DataFrame({'sample': np.arange(len(test)), 'label': test.labels, 'prediction': preds}).to_csv(
        out / 'predictions.csv', index=False)
    accuracy = float((preds == test.labels).mean()) if len(test) else float('nan')
    summary = {'mode': mode.value, 'samples': int(len(test)), 'accuracy': accuracy}
    if mode is ExecutionMode.ASYNC_EVENT and args.trace:
        x = evaluation_inputs(test, cfg['profile.samples'], model.spec.neuron.t_steps)
        result = run_async(model, x, seed=cfg.seed, queue_factor=cfg['async.queue_factor'], trace=True)
        write_trace(result.trace, out / 'trace.csv')
        result.summary().to_csv(out / 'async_layers.csv', index=False)
        summary['trace_samples'] = int(x.shape[-4])
        summary['accumulations'] = result.op_count
    _write_json(out / 'summary.json', summary)
    logger.info('%s inference: accuracy %.3f on %d samples', mode.value, accuracy, len(test))
    return 0


def cmd_equiv_check(args, cfg: ExperimentConfig, out: Path) -> int:
    model = _model_for(args, cfg)
    _, test = load_data(cfg)
    x = evaluation_inputs(test, cfg['profile.samples'], model.spec.neuron.t_steps)
    report = equivalence_report(model, x, seed=cfg.seed, queue_factor=cfg['async.queue_factor'])
    report.layers.to_csv(out / 'equivalence_layers.csv', index=False)
    report.per_sample.to_csv(out / 'equivalence_samples.csv', index=False)
    report.mismatches.to_csv(out / 'equivalence_mismatches.csv', index=False)
    _write_json(out / 'summary.json', report.summary())
    if not report.passed:
        raise EquivalenceError(f'modes disagree, first divergent layer {report.first_divergent_layer}',
                               diff=report.mismatches)
    return 0


def cmd_profile(args, cfg: ExperimentConfig, out: Path) -> int:
    model = _model_for(args, cfg)
    _, test = load_data(cfg)
    x = evaluation_inputs(test, cfg['profile.samples'], model.spec.neuron.t_steps)
    report = profile(model, x, args.mode, cfg.energy_model, seed=cfg.seed,
                     queue_factor=cfg['async.queue_factor'])
    report.sop_table().to_csv(out / 'sops.csv', index=False)
    report.nsfr_table().to_csv(out / 'nsfr.csv', index=False)
    _write_json(out / 'summary.json', report.summary())
    if args.figures:
        from src.plots import plot_nsfr
        plot_nsfr({'sfa' if model.spec.neuron.d_cap > 1 else 'vanilla': report.nsfr}, out / 'nsfr.png',
                  d_cap=model.spec.neuron.d_cap)
    return 0


def cmd_spike_map(args, cfg: ExperimentConfig, out: Path) -> int:
    model = _model_for(args, cfg)
    _, test = load_data(cfg)
    x = evaluation_inputs(test, cfg['profile.samples'], model.spec.neuron.t_steps)
    records = run_sync(model, x).records
    maps = export_spike_map(records, args.reduce, out / 'spike_maps')
    _write_json(out / 'summary.json', {
        'reduce': args.reduce, 'layers': len(maps),
        'max_rate': max((m.max_rate for m in maps.values()), default=0.0),
        'nsfr_sum': float(np.sum(nsfr_series(records)))})
    if args.figures:
        from src.plots import plot_spike_maps
        for name, sm in maps.items():
            plot_spike_maps(sm.maps, out / 'spike_maps' / f'{name}.png', title=name)
    return 0


def cmd_sweep_d(args, cfg: ExperimentConfig, out: Path) -> int:
    runs = run_d_sweep(cfg)
    table = d_sweep_table(runs)
    runs.to_csv(out / 'sweep_runs.csv', index=False)
    table.to_csv(out / 'sweep_table.csv', index=False)
    if args.figures:
        from src.plots import plot_d_sweep
        plot_d_sweep(table, out / 'sweep.png')
    return 0


COMMANDS = {
    'train': (cmd_train, 'train a classifier (static, dynamic or vanilla baseline)'),
    'pretrain-mim': (cmd_pretrain_mim, 'masked image pretraining of a sparse-conv encoder'),
    'finetune': (cmd_finetune, 'fine-tune a pretrained encoder as a classifier'),
    'infer': (cmd_infer, 'classify the test split in one execution mode'),
    'equiv-check': (cmd_equiv_check, 'compare integer, expanded and event-driven execution'),
    'profile': (cmd_profile, 'synaptic operations, NSFR and energy estimate'),
    'spike-map': (cmd_spike_map, 'export per-layer firing-rate maps'),
    'sweep-d': (cmd_sweep_d, 'train and profile across activation caps D and seeds'),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='experiment file of key = value lines')
    common.add_argument('--mode', choices=('integer', 'sync', 'async'), default='sync')
    common.add_argument('--d-cap', type=int, help='override neuron.d_cap')
    common.add_argument('--seed', type=int, help='override seed')
    common.add_argument('--out', type=Path, help='output directory (overrides out)')
    common.add_argument('--checkpoint', type=Path, help='model archive to load')
    common.add_argument('--figures', action='store_true', help='also render PNG figures')
    common.add_argument('--log-level', default='INFO', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))

    parser = argparse.ArgumentParser(prog='python -m src.cli', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == 'spike-map':
            p.add_argument('--reduce', choices=('channel', 'channel+time'), default='channel')
        if name == 'infer':
            p.add_argument('--trace', action='store_true', help='write the async event trace')
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        overrides = {'neuron.d_cap': args.d_cap, 'seed': args.seed,
                     'out': str(args.out) if args.out is not None else None}
        cfg = load_config(args.config, overrides)
        out = cfg.out
        out.mkdir(parents=True, exist_ok=True)
        cfg.write_manifest(out)
        handler, _ = COMMANDS[args.command]
        return handler(args, cfg, out)
    except SNNError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
