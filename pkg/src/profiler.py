"""
Spike statistics and energy accounting.

    NSFR[t]  = spikes fired at step t / neurons, pooled over layers and samples
    SOPs     = sum over spikes of the accumulations each one triggers
    energy   = SOPs * e_ac + first-layer MACs * e_mac

Attention accounting: a K spike at token l adds that token's V counts into
K^T V, one accumulate per V spike of its head; a Q spike adds one K^T V row,
gamma * d_head accumulates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from config import E_AC, E_MAC, QUEUE_BOUND_FACTOR
from src.errors import ConfigError, ShapeError
from src.executors import ExecutionMode, run_async, run_sync
from src.neuron import SpikeRecord, expand_to_spikes
from src.program import AttentionOp, HeadOp, InferenceProgram, SynapseOp, as_program

logger = logging.getLogger(__name__)

ATTENTION_SOP_FORMULA = 'sops(attn) = sum_{n,h,l} K_h[n,l] * V_h[n,l] + |Q spikes| * gamma * d_head'


@dataclass(frozen=True)
class EnergyModel:
    e_ac: float = E_AC
    e_mac: float = E_MAC

    def __post_init__(self):
        if self.e_ac <= 0 or self.e_mac <= 0:
            raise ConfigError(f'energy constants must be positive, got e_ac={self.e_ac}, e_mac={self.e_mac}')


@dataclass
class EnergyReport:
    sops: dict[str, int]
    nsfr: np.ndarray
    first_layer_macs: int
    energy_j: float
    em: EnergyModel = field(default_factory=EnergyModel)
    mode: str = ExecutionMode.SYNC_EXPANDED.value

    @property
    def total_sops(self) -> int:
        return int(sum(self.sops.values()))

    @property
    def mean_spikes_per_neuron(self) -> float:
        return float(np.sum(self.nsfr))

    def sop_table(self) -> pd.DataFrame:
        return pd.DataFrame({'layer': list(self.sops), 'sops': list(self.sops.values())})

    def nsfr_table(self) -> pd.DataFrame:
        return pd.DataFrame({'step': np.arange(1, len(self.nsfr) + 1), 'nsfr': self.nsfr})

    def summary(self) -> dict:
        return {
            'mode': self.mode,
            'total_sops': self.total_sops,
            'first_layer_macs': int(self.first_layer_macs),
            'energy_j': float(self.energy_j),
            'e_ac': self.em.e_ac,
            'e_mac': self.em.e_mac,
            'mean_spikes_per_neuron': self.mean_spikes_per_neuron,
            'nsfr_sum': float(np.sum(self.nsfr)),
            'attention_accounting': ATTENTION_SOP_FORMULA,
        }


def nsfr_series(records: list[SpikeRecord]) -> np.ndarray:
    """Per-step fraction of neurons that fire, pooled over layers and samples."""
    if not records:
        return np.zeros(0)
    steps = {r.spikes.shape[0] for r in records}
    if len(steps) != 1:
        raise ShapeError(f'records disagree on step count: {sorted(steps)}')
    fired = np.zeros(steps.pop())
    neurons = 0
    for r in records:
        fired += r.spikes.reshape(r.spikes.shape[0], -1).sum(axis=1, dtype=np.int64)
        neurons += r.spikes[0].size
    return fired / neurons


def synaptic_ops(program: InferenceProgram, counts: dict[str, np.ndarray]) -> dict[str, int]:
    """SOPs per consuming layer from integer counts (T, N, C, H, W) keyed by SN layer."""
    out: dict[str, int] = {}
    for op in program.ops:
        if isinstance(op, SynapseOp) and op.spiking:
            s = counts[op.src].astype(np.int64)
            fan = op.fanout_map(*s.shape[-2:])
            out[op.name] = int((s.sum(axis=(0, 1, 2)) * fan).sum())
        elif isinstance(op, HeadOp):
            out[op.name] = int(counts[op.src].astype(np.int64).sum()) * op.weight.shape[1]
        elif isinstance(op, AttentionOp):
            q, k, v = (counts[name].astype(np.int64) for name in (op.q, op.k, op.v))
            t, n, c, h, w = k.shape
            cv = v.shape[2]
            k_head = k.reshape(t, n, op.heads, c // op.heads, h * w).sum(axis=3)
            v_head = v.reshape(t, n, op.heads, cv // op.heads, h * w).sum(axis=3)
            out[op.name] = int((k_head * v_head).sum()) + int(q.sum()) * (cv // op.heads)
    return out


def count_sops(records: list[SpikeRecord], model_or_program) -> dict[str, int]:
    program = as_program(model_or_program)
    return synaptic_ops(program, {r.layer_id: r.window_sums() for r in records})


def estimate_energy(sops: int | dict[str, int], first_layer_macs: int, em: EnergyModel = EnergyModel()) -> float:
    total = sum(sops.values()) if isinstance(sops, dict) else sops
    return float(total) * em.e_ac + float(first_layer_macs) * em.e_mac


def profile(model_or_program, x, mode: ExecutionMode | str = ExecutionMode.SYNC_EXPANDED,
            em: EnergyModel = EnergyModel(), seed: int = 0,
            queue_factor: float = QUEUE_BOUND_FACTOR) -> EnergyReport:
    """SOPs, NSFR and energy of one batch; integer mode counts like sync."""
    program = as_program(model_or_program)
    mode = ExecutionMode.parse(mode) if isinstance(mode, str) else mode
    d_cap, t_steps = program.neuron.d_cap, program.neuron.t_steps
    if mode is ExecutionMode.ASYNC_EVENT:
        result = run_async(program, x, seed=seed, queue_factor=queue_factor)
        sops = dict(result.ops_by_layer)
        records = [SpikeRecord(name, np.concatenate([expand_to_spikes(s, d_cap) for s in c]), d_cap, t_steps)
                   for name, c in result.counts.items()]
    else:
        records = run_sync(program, x).records
        sops = count_sops(records, program)
    n = records[0].spikes.shape[1] if records else 0
    macs = program.first_layer_macs() * n * t_steps
    report = EnergyReport(sops=sops, nsfr=nsfr_series(records), first_layer_macs=macs,
                          energy_j=estimate_energy(sops, macs, em), em=em, mode=mode.value)
    logger.info('profile (%s): %d SOPs, %d MACs, %.3e J, %.3f spikes/neuron',
                mode.value, report.total_sops, macs, report.energy_j, report.mean_spikes_per_neuron)
    return report


@dataclass
class SpikeMap:
    layer: str
    maps: np.ndarray          # (steps, H, W) channel-mean firing rate, or (1, H, W) fully reduced
    reduce: str

    @property
    def max_rate(self) -> float:
        return float(self.maps.max()) if self.maps.size else 0.0


def _reduce(record: SpikeRecord, reduce: str) -> np.ndarray:
    if record.spikes.ndim != 5:
        raise ShapeError(f'{record.layer_id}: spike map needs (steps, N, C, H, W), got {record.spikes.shape}')
    per_step = record.firing_rate_map.mean(axis=1)
    if reduce == 'channel':
        return per_step
    if reduce == 'channel+time':
        return per_step.mean(axis=0, keepdims=True)
    raise ConfigError(f"reduce must be 'channel' or 'channel+time', got {reduce!r}")


def _write_gray(img: np.ndarray, path: Path) -> None:
    pixels = np.clip(np.floor(img * 255 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def export_spike_map(records: list[SpikeRecord], reduce: str = 'channel', out_dir=None) -> dict[str, SpikeMap]:
    """Firing-rate maps averaged over samples and channels; written as .pgm + .txt when out_dir is given."""
    maps = {r.layer_id: SpikeMap(r.layer_id, _reduce(r, reduce), reduce) for r in records}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, sm in maps.items():
            tag = 'mean' if reduce == 'channel+time' else 'step'
            for i, img in enumerate(sm.maps):
                stem = f'{name}_{tag}{i + 1 if tag == "step" else ""}'
                _write_gray(img, out / f'{stem}.pgm')
                np.savetxt(out / f'{stem}.txt', img, fmt='%.6f')
        pd.DataFrame({'layer': list(maps), 'max_rate': [m.max_rate for m in maps.values()]}).to_csv(
            out / f'max_rate_{reduce.replace("+", "_")}.csv', index=False)
    return maps
