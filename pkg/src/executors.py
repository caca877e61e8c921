"""
Spike-driven inference of a compiled program in three modes.

    integer        one pass per window with Fire_D counts (reference semantics)
    sync_expanded  every SN emits its front-loaded D-step train; synapses
                   accumulate W/D * S[d] per micro-step, bias once per window
    async_event    no step barrier: spikes become events in per-layer queues,
                   drained in randomized chunks into 64-bit compensated
                   accumulators

All three share the same fire rule, so spike counts agree exactly and logits
differ only by float summation order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import pandas as pd

from config import ASYNC_RTOL, LOGIT_ATOL, LOGIT_RTOL, MAX_CHUNK, QUEUE_BOUND_FACTOR
from src.blocks import linear_attention
from src.conv import conv2d_forward
from src.errors import ContractError, EquivalenceError, QueueOverflowError, ShapeError
from src.neuron import NeuronConfig, SpikeRecord, carry_membrane, expand_to_spikes, fire_d
from src.program import (INPUT, AddOp, AttentionOp, FireOp, HeadOp, InferenceProgram, SynapseOp,
                         as_program)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['sample', 'window', 'layer', 'channel', 'y', 'x', 'micro_step']


class ExecutionMode(str, Enum):
    INTEGER = 'integer'
    SYNC_EXPANDED = 'sync_expanded'
    ASYNC_EVENT = 'async_event'

    @classmethod
    def parse(cls, text: str) -> 'ExecutionMode':
        aliases = {'sync': cls.SYNC_EXPANDED, 'async': cls.ASYNC_EVENT}
        if text in aliases:
            return aliases[text]
        return cls(text)


@dataclass(frozen=True)
class Event:
    """One spike: neuron address, micro-step within its window; polarity is always 1."""
    layer: str
    sample: int
    channel: int
    y: int
    x: int
    micro_step: int
    window: int = 0
    polarity: int = 1


def window_inputs(program: InferenceProgram, x) -> np.ndarray:
    """(N, C, H, W) for T = 1 or (T, N, C, H, W) -> float64 (T, N, C, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    t = program.neuron.t_steps
    if x.ndim == 4 and t == 1:
        x = x[None]
    if x.ndim != 5 or x.shape[0] != t or tuple(x.shape[2:]) != tuple(program.input_shape):
        raise ShapeError(f'expected input (T={t}, N, {program.input_shape}), got {x.shape}')
    return x


class _FireState:
    """Membrane carried across windows by one FireOp."""

    def __init__(self, op: FireOp, cfg: NeuronConfig):
        self.op = op
        self.cfg = NeuronConfig(cfg.beta, op.v_th, cfg.v_reset, cfg.reset_mode, cfg.d_cap, cfg.t_steps)
        self.h: np.ndarray | None = None

    def fire(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = x if self.h is None else self.cfg.beta * self.h + x
        return u, fire_d(u * (1.0 / self.op.v_th), self.cfg.d_cap)

    def carry(self, u: np.ndarray, count: np.ndarray) -> None:
        if self.cfg.t_steps > 1:
            self.h = carry_membrane(self.cfg, u, count)


def _bias(op: SynapseOp) -> np.ndarray:
    return op.bias.reshape(1, -1, 1, 1)


def _conv(op: SynapseOp, x: np.ndarray) -> np.ndarray:
    return conv2d_forward(x, op.weight, None, op.stride, op.padding, op.groups)


def _pool(s: np.ndarray) -> np.ndarray:
    return s.sum(axis=(2, 3))


# integer mode

@dataclass
class IntegerResult:
    logits: np.ndarray
    window_logits: np.ndarray
    activations: dict[str, np.ndarray]   # (T, N, C, H, W) integer counts per SN layer


def run_integer(model_or_program, x) -> IntegerResult:
    program = as_program(model_or_program)
    windows = window_inputs(program, x)
    states = {op.name: _FireState(op, program.neuron) for op in program.fire_ops}
    acts: dict[str, list[np.ndarray]] = {name: [] for name in states}
    window_logits = []
    for xt in windows:
        values: dict[str, np.ndarray] = {INPUT: xt}
        for op in program.ops:
            if isinstance(op, SynapseOp):
                values[op.dst] = _bias(op) + _conv(op, values[op.src])
            elif isinstance(op, FireOp):
                state = states[op.name]
                u, s = state.fire(values[op.src])
                state.carry(u, s)
                values[op.dst] = s
                acts[op.name].append(s)
            elif isinstance(op, AddOp):
                values[op.dst] = values[op.a] + values[op.b]
            elif isinstance(op, AttentionOp):
                values[op.dst] = linear_attention(values[op.q], values[op.k], values[op.v], op.heads)
            elif isinstance(op, HeadOp):
                window_logits.append(op.bias + _pool(values[op.src]) @ op.weight)
    wl = np.stack(window_logits)
    return IntegerResult(logits=wl.mean(axis=0), window_logits=wl,
                         activations={k: np.stack(v) for k, v in acts.items()})


def infer_integer(model_or_program, x) -> np.ndarray:
    return run_integer(model_or_program, x).logits


# synchronous expansion

Expander = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class SyncResult:
    logits: np.ndarray
    window_logits: np.ndarray
    records: list[SpikeRecord]


def _attention_sync(op: AttentionOp, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Q (K^T V) accumulated over micro-steps; all terms are integers so the order is exact."""
    d_cap, n, c, h, w = q.shape
    cv = v.shape[2]
    length, heads = h * w, op.heads
    dh, dv = c // heads, cv // heads
    v_total = v.sum(axis=0, dtype=np.float64).reshape(n, heads, dv, length).transpose(0, 1, 3, 2)
    kv = np.zeros((n, heads, dh, dv))
    for d in range(d_cap):
        kv += k[d].astype(np.float64).reshape(n, heads, dh, length) @ v_total
    a = np.zeros((n, heads, length, dv))
    for d in range(d_cap):
        a += q[d].astype(np.float64).reshape(n, heads, dh, length).transpose(0, 1, 3, 2) @ kv
    return a.transpose(0, 1, 3, 2).reshape(n, cv, h, w)


def run_sync(model_or_program, x, expand: Expander = expand_to_spikes) -> SyncResult:
    """expand maps integer counts to a (D, ...) binary train; swap it to inject faults."""
    program = as_program(model_or_program)
    windows = window_inputs(program, x)
    d_cap = program.neuron.d_cap
    states = {op.name: _FireState(op, program.neuron) for op in program.fire_ops}
    trains: dict[str, list[np.ndarray]] = {name: [] for name in states}
    window_logits = []
    for t, xt in enumerate(windows):
        values: dict[str, np.ndarray] = {INPUT: xt}
        for op in program.ops:
            if isinstance(op, SynapseOp):
                src = values[op.src]
                if not op.spiking:
                    values[op.dst] = _bias(op) + _conv(op, src)
                    continue
                acc = _bias(op) + _conv(op, src[0].astype(np.float64))
                for d in range(1, d_cap):
                    acc = acc + _conv(op, src[d].astype(np.float64))
                values[op.dst] = acc
            elif isinstance(op, FireOp):
                state = states[op.name]
                u, s = state.fire(values[op.src])
                spikes = np.asarray(expand(s, d_cap), dtype=np.uint8)
                state.carry(u, spikes.sum(axis=0, dtype=np.int64).astype(u.dtype))
                values[op.dst] = spikes
                trains[op.name].append(spikes)
            elif isinstance(op, AddOp):
                values[op.dst] = values[op.a] + values[op.b]
            elif isinstance(op, AttentionOp):
                values[op.dst] = _attention_sync(op, values[op.q], values[op.k], values[op.v])
            elif isinstance(op, HeadOp):
                src = values[op.src]
                logits = op.bias + _pool(src[0].astype(np.float64)) @ op.weight
                for d in range(1, d_cap):
                    logits = logits + _pool(src[d].astype(np.float64)) @ op.weight
                window_logits.append(logits)
        logger.debug('sync window %d/%d done', t + 1, len(windows))
    records = [SpikeRecord(name, np.concatenate(v, axis=0), d_cap, program.neuron.t_steps)
               for name, v in trains.items()]
    wl = np.stack(window_logits)
    return SyncResult(logits=wl.mean(axis=0), window_logits=wl, records=records)


def infer_sync_expanded(model_or_program, x, expand: Expander = expand_to_spikes
                        ) -> tuple[np.ndarray, list[SpikeRecord]]:
    result = run_sync(model_or_program, x, expand)
    return result.logits, result.records


# asynchronous events

def spike_events(s_int: np.ndarray, d_cap: int) -> np.ndarray:
    """Front-loaded events of integer counts (N, C, H, W) as rows (n, c, y, x, micro_step), step-ordered."""
    blocks = [np.column_stack([np.argwhere(s_int > d), np.full(int((s_int > d).sum()), d)])
              for d in range(d_cap)]
    events = np.concatenate(blocks) if blocks else np.zeros((0, 5))
    return events.astype(np.int64).reshape(-1, 5)


def neumaier_add(acc: np.ndarray, comp: np.ndarray, term: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    total = acc + term
    comp = comp + np.where(np.abs(acc) >= np.abs(term), (acc - total) + term, (term - total) + acc)
    return total, comp


class EventQueue:
    """
    FIFO of event rows with a depth bound; peak records the deepest point reached.
    A producer offers a window micro-step by micro-step: the next step is staged
    until the queue has drained the previous one.
    """

    def __init__(self, owner: str, bound: int | None):
        self.owner = owner
        self.bound = bound
        self.blocks: list[np.ndarray] = []
        self.staged: list[np.ndarray] = []
        self.head = 0
        self.peak = 0
        self.events = 0

    @property
    def depth(self) -> int:
        return sum(len(b) for b in self.blocks) - self.head

    @property
    def exhausted(self) -> bool:
        return not self.depth and not self.staged

    def offer(self, events: np.ndarray) -> None:
        """Stage step-ordered rows (micro_step in the last column), one step per release."""
        if not len(events):
            return
        cuts = np.flatnonzero(np.diff(events[:, -1])) + 1
        self.staged.extend(np.split(events, cuts))
        self.refill()

    def refill(self) -> None:
        if self.staged and not self.depth:
            self.push(self.staged.pop(0))

    def push(self, events: np.ndarray) -> None:
        if not len(events):
            return
        self.blocks.append(events)
        self.events += len(events)
        depth = self.depth
        self.peak = max(self.peak, depth)
        if self.bound is not None and depth > self.bound:
            raise QueueOverflowError(self.owner, depth, self.bound)

    def pop(self, count: int) -> np.ndarray:
        pending = np.concatenate(self.blocks)[self.head:] if len(self.blocks) > 1 else self.blocks[0][self.head:]
        taken, rest = pending[:count], pending[count:]
        self.blocks, self.head = ([rest] if len(rest) else []), 0
        self.refill()
        return taken


class _SynapseSink:
    """Address-mapped accumulation of one conv/linear layer."""

    def __init__(self, op: SynapseOp, out_shape: tuple):
        self.op = op
        self.acc = np.broadcast_to(_bias(op), out_shape).astype(np.float64)
        self.comp = np.zeros(out_shape)
        self.ops = 0

    def consume(self, ev: np.ndarray) -> None:
        op = self.op
        n, c, y, x = ev[:, 0], ev[:, 1], ev[:, 2], ev[:, 3]
        cout, cin_g, k, _ = op.weight.shape
        cog = cout // op.groups
        ci = c % cin_g
        co = (c // cin_g)[:, None] * cog + np.arange(cog)
        _, _, ho, wo = self.acc.shape
        s, p = op.stride, op.padding
        partial = np.zeros_like(self.acc)
        for ky in range(k):
            oy = y + p - ky
            vy = (oy % s == 0) & (oy >= 0) & (oy // s < ho)
            for kx in range(k):
                ox = x + p - kx
                valid = np.flatnonzero(vy & (ox % s == 0) & (ox >= 0) & (ox // s < wo))
                if not valid.size:
                    continue
                np.add.at(partial, (n[valid, None], co[valid], (oy[valid] // s)[:, None], (ox[valid] // s)[:, None]),
                          op.weight[co[valid], ci[valid, None], ky, kx])
                self.ops += valid.size * cog
        self.acc, self.comp = neumaier_add(self.acc, self.comp, partial)

    def value(self) -> np.ndarray:
        return self.acc + self.comp


class _HeadSink:
    def __init__(self, op: HeadOp, n: int):
        self.op = op
        self.acc = np.broadcast_to(op.bias, (n, op.bias.size)).astype(np.float64)
        self.comp = np.zeros_like(self.acc)
        self.ops = 0

    def consume(self, ev: np.ndarray) -> None:
        partial = np.zeros_like(self.acc)
        np.add.at(partial, ev[:, 0], self.op.weight[ev[:, 1]])
        self.ops += len(ev) * self.op.weight.shape[1]
        self.acc, self.comp = neumaier_add(self.acc, self.comp, partial)

    def value(self) -> np.ndarray:
        return self.acc + self.comp


class _AttentionSink:
    """
    V events fill per-token counts; each K event adds its token's V-count row
    into K^T V; each Q event adds a K^T V row into A. K waits for V, Q for K.
    """

    def __init__(self, op: AttentionOp, q_shape: tuple, v_shape: tuple):
        self.op = op
        n, c, h, w = q_shape
        self.hw = (h, w)
        self.cv = v_shape[1]
        self.dh, self.dv = c // op.heads, self.cv // op.heads
        self.v_count = np.zeros((n, self.cv, h * w))
        self.kv = np.zeros((n, op.heads, self.dh, self.dv))
        self.a = np.zeros((n, op.heads, h * w, self.dv))
        self.ops = 0

    def consume(self, role: str, ev: np.ndarray) -> None:
        n, c, token = ev[:, 0], ev[:, 1], ev[:, 2] * self.hw[1] + ev[:, 3]
        if role == 'v':
            np.add.at(self.v_count, (n, c, token), 1.0)
            return
        head, row = c // self.dh, c % self.dh
        if role == 'k':
            cols = (head * self.dv)[:, None] + np.arange(self.dv)
            rows = self.v_count[n[:, None], cols, token[:, None]]
            np.add.at(self.kv, (n, head, row), rows)
            self.ops += int(rows.sum())
        else:
            np.add.at(self.a, (n, head, token), self.kv[n, head, row])
            self.ops += len(ev) * self.dv

    def value(self) -> np.ndarray:
        n = self.a.shape[0]
        return self.a.transpose(0, 1, 3, 2).reshape(n, self.cv, *self.hw)


@dataclass
class AsyncResult:
    logits: np.ndarray
    window_logits: np.ndarray
    counts: dict[str, np.ndarray]           # (T, N, C, H, W) events per neuron per SN layer
    ops_by_layer: dict[str, int]
    peak_queue: dict[str, int]
    events_by_layer: dict[str, int]
    trace: pd.DataFrame | None = None

    @property
    def op_count(self) -> int:
        return int(sum(self.ops_by_layer.values()))

    def summary(self) -> pd.DataFrame:
        rows = [{'layer': name, 'accumulations': self.ops_by_layer[name],
                 'events': self.events_by_layer.get(name, 0), 'peak_queue': self.peak_queue.get(name, 0)}
                for name in self.ops_by_layer]
        return pd.DataFrame(rows, columns=['layer', 'accumulations', 'events', 'peak_queue'])


class _AsyncWindow:
    """Scheduler state of one window; membranes complete as their inbound queues drain."""

    def __init__(self, program: InferenceProgram, states: dict[str, _FireState], rng: np.random.Generator,
                 queue_bound: int | None, queue_factor: float, max_chunk: int | None):
        self.program = program
        self.states = states
        self.rng = rng
        self.queue_bound = queue_bound
        self.queue_factor = queue_factor
        self.max_chunk = max_chunk
        self.d_cap = program.neuron.d_cap
        self.values: dict[str, np.ndarray] = {}
        self.fired: dict[str, np.ndarray] = {}
        self.sinks: dict[str, object] = {}
        self.queues: dict[tuple[str, str], EventQueue] = {}
        self.done: set[int] = set()

    def _bound(self, s_int: np.ndarray) -> int:
        if self.queue_bound is not None:
            return self.queue_bound
        return math.ceil(self.queue_factor * s_int.size / self.d_cap)

    def _queue(self, owner: str, role: str, bound: int) -> EventQueue:
        key = (owner, role)
        if key not in self.queues:
            self.queues[key] = EventQueue(owner if role == 'in' else f'{owner}.{role}', bound)
        return self.queues[key]

    def _fire(self, op: FireOp) -> np.ndarray:
        state = self.states[op.name]
        u, s = state.fire(self.values[op.src])
        state.carry(u, s)
        self.fired[op.name] = s
        events = spike_events(s, self.d_cap)
        bound = self._bound(s)
        for consumer in self.program.consumers(op.name):
            if isinstance(consumer, AttentionOp):
                role = next(r for r in ('q', 'k', 'v') if getattr(consumer, r) == op.name)
                self._sink_for(consumer)
                self._queue(consumer.name, role, bound).offer(events)
            elif isinstance(consumer, (SynapseOp, HeadOp)):
                self._sink_for(consumer)
                self._queue(consumer.name, 'in', bound).offer(events)
            else:
                raise ContractError(f'{op.name} feeds a non-synaptic op {consumer}')
        return events

    def _sink_for(self, op):
        if op.name in self.sinks:
            return self.sinks[op.name]
        if isinstance(op, SynapseOp):
            n, _, h, w = self.fired[op.src].shape
            ho, wo = op.out_hw(h, w)
            sink = _SynapseSink(op, (n, op.weight.shape[0], ho, wo))
        elif isinstance(op, HeadOp):
            sink = _HeadSink(op, self.fired[op.src].shape[0])
        else:
            ref = next(self.fired[r] for r in (op.q, op.k, op.v) if r in self.fired)
            n, _, h, w = ref.shape
            sink = _AttentionSink(op, (n, self._channels(op.q), h, w), (n, self._channels(op.v), h, w))
        self.sinks[op.name] = sink
        return sink

    def _channels(self, fire_name: str) -> int:
        src = next(o.src for o in self.program.fire_ops if o.name == fire_name)
        return next(o.weight.shape[0] for o in self.program.ops if isinstance(o, SynapseOp) and o.dst == src)

    def _drained(self, owner: str, role: str = 'in') -> bool:
        q = self.queues.get((owner, role))
        return q is None or q.exhausted

    def _ready(self, op) -> bool:
        if isinstance(op, FireOp):
            return op.src in self.values
        if isinstance(op, AddOp):
            return op.a in self.values and op.b in self.values
        if isinstance(op, SynapseOp):
            if not op.spiking:
                return op.src in self.values
            return op.src in self.fired and self._drained(op.name)
        if isinstance(op, HeadOp):
            return op.src in self.fired and self._drained(op.name)
        return all(getattr(op, r) in self.fired and self._drained(op.name, r) for r in ('q', 'k', 'v'))

    def _complete(self, op) -> None:
        if isinstance(op, FireOp):
            self._fire(op)
            self.values[op.name] = self.fired[op.name]
        elif isinstance(op, AddOp):
            self.values[op.dst] = self.values[op.a] + self.values[op.b]
        elif isinstance(op, SynapseOp) and not op.spiking:
            self.values[op.dst] = _bias(op) + _conv(op, self.values[op.src])
        elif isinstance(op, AttentionOp):
            self.values[op.dst] = self._sink_for(op).value()
        else:
            self.values[op.dst if isinstance(op, SynapseOp) else op.name] = self._sink_for(op).value()

    def _eligible(self) -> list[tuple[str, str]]:
        out = []
        for (owner, role), q in self.queues.items():
            if not q.depth:
                continue
            if role == 'k' and not self._role_done(owner, 'v'):
                continue
            if role == 'q' and not (self._role_done(owner, 'v') and self._role_done(owner, 'k')):
                continue
            out.append((owner, role))
        return out

    def _role_done(self, owner: str, role: str) -> bool:
        op = next(o for o in self.program.ops if isinstance(o, AttentionOp) and o.name == owner)
        return getattr(op, role) in self.fired and self._drained(owner, role)

    def run(self, xt: np.ndarray) -> np.ndarray:
        self.values[INPUT] = xt
        ops = self.program.ops
        while len(self.done) < len(ops):
            progressed = False
            for i, op in enumerate(ops):
                if i not in self.done and self._ready(op):
                    self._complete(op)
                    self.done.add(i)
                    progressed = True
            eligible = self._eligible()
            if eligible:
                owner, role = eligible[self.rng.integers(len(eligible))]
                queue = self.queues[(owner, role)]
                limit = queue.depth if self.max_chunk is None else min(queue.depth, self.max_chunk)
                chunk = queue.pop(int(self.rng.integers(1, limit + 1)))
                sink = self.sinks[owner]
                if isinstance(sink, _AttentionSink):
                    sink.consume(role, chunk)
                else:
                    sink.consume(chunk)
                progressed = True
            if not progressed:
                raise ContractError('async schedule stalled with pending ops')
        return self.values[self.program.head.name]


def run_async(model_or_program, x, seed: int = 0, queue_bound: int | None = None,
              queue_factor: float = QUEUE_BOUND_FACTOR, max_chunk: int | None = MAX_CHUNK,
              trace: bool = False) -> AsyncResult:
    """
    Event-driven run: every consumer queue receives its producer's spikes one
    micro-step at a time and queues drain in a seeded random interleaving, so
    layers progress independently with no shared step clock. A spiking layer
    fires once all of its inbound queues are exhausted for the window, since
    its integer count needs the complete membrane.

    queue_bound fixes every queue's depth limit; otherwise each queue admits
    ceil(queue_factor * producer neurons / D) pending events of one micro-step.
    """
    program = as_program(model_or_program)
    windows = window_inputs(program, x)
    rng = np.random.default_rng(seed)
    states = {op.name: _FireState(op, program.neuron) for op in program.fire_ops}
    counts: dict[str, list[np.ndarray]] = {name: [] for name in states}
    ops_by_layer: dict[str, int] = {}
    peak: dict[str, int] = {}
    events_by_layer: dict[str, int] = {}
    frames: list[pd.DataFrame] = []
    window_logits = []
    for t, xt in enumerate(windows):
        window = _AsyncWindow(program, states, rng, queue_bound, queue_factor, max_chunk)
        window_logits.append(window.run(xt))
        for name, s in window.fired.items():
            counts[name].append(s)
            if trace:
                ev = spike_events(s, program.neuron.d_cap)
                frames.append(pd.DataFrame({'sample': ev[:, 0], 'window': t, 'layer': name, 'channel': ev[:, 1],
                                            'y': ev[:, 2], 'x': ev[:, 3], 'micro_step': ev[:, 4]},
                                           columns=TRACE_COLUMNS))
        for name, sink in window.sinks.items():
            ops_by_layer[name] = ops_by_layer.get(name, 0) + int(sink.ops)
        for q in window.queues.values():
            peak[q.owner] = max(peak.get(q.owner, 0), q.peak)
            events_by_layer[q.owner] = events_by_layer.get(q.owner, 0) + q.events
        logger.debug('async window %d/%d: %d accumulations so far', t + 1, len(windows), sum(ops_by_layer.values()))
    wl = np.stack(window_logits)
    trace_df = None
    if trace:
        trace_df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=TRACE_COLUMNS)
    return AsyncResult(logits=wl.mean(axis=0), window_logits=wl,
                       counts={k: np.stack(v) for k, v in counts.items()},
                       ops_by_layer=ops_by_layer, peak_queue=peak, events_by_layer=events_by_layer,
                       trace=trace_df)


def infer_async_event(model_or_program, x, seed: int = 0, **kwargs) -> tuple[np.ndarray, pd.DataFrame, int]:
    result = run_async(model_or_program, x, seed=seed, trace=True, **kwargs)
    return result.logits, result.trace, result.op_count


def trace_events(trace: pd.DataFrame) -> list[Event]:
    return [Event(layer=r.layer, sample=int(r.sample), channel=int(r.channel), y=int(r.y), x=int(r.x),
                  micro_step=int(r.micro_step), window=int(r.window))
            for r in trace.itertuples(index=False)]


def write_trace(trace: pd.DataFrame, path) -> None:
    trace.to_csv(path, index=False)


# equivalence

def relative_deviation(a: np.ndarray, b: np.ndarray, atol: float = LOGIT_ATOL) -> np.ndarray:
    """Per-sample max |a - b| over classes, relative to the larger logit magnitude."""
    scale = np.maximum(np.abs(a).max(axis=-1), np.abs(b).max(axis=-1))
    return np.abs(a - b).max(axis=-1) / np.maximum(scale, atol)


@dataclass
class EquivalenceReport:
    layers: pd.DataFrame                       # layer, neurons, sync_matches, async_matches
    per_sample: pd.DataFrame                   # sample, max_abs_int_sync, max_abs_int_async, rel_...
    mismatches: pd.DataFrame                   # per-neuron diff rows, empty when healthy
    rtol: float
    async_rtol: float
    op_count: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def spikes_match(self) -> bool:
        return self.mismatches.empty

    @property
    def logits_match(self) -> bool:
        ps = self.per_sample
        return bool((ps['rel_int_sync'] <= self.rtol).all() and (ps['rel_int_async'] <= self.rtol).all()
                    and (ps['rel_sync_async'] <= self.async_rtol).all())

    @property
    def passed(self) -> bool:
        return self.spikes_match and self.logits_match

    @property
    def match_fraction(self) -> float:
        ok = ((self.layers['sync_matches'] == self.layers['neurons'])
              & (self.layers['async_matches'] == self.layers['neurons']))
        return float(ok.mean()) if len(ok) else 1.0

    @property
    def first_divergent_layer(self) -> str | None:
        return None if self.mismatches.empty else str(self.mismatches['layer'].iloc[0])

    def summary(self) -> dict:
        ps = self.per_sample
        return {'passed': self.passed, 'layers': int(len(self.layers)),
                'layer_match_fraction': self.match_fraction,
                'mismatched_neurons': int(len(self.mismatches)),
                'first_divergent_layer': self.first_divergent_layer,
                'max_abs_logit_diff_sync': float(ps['max_abs_int_sync'].max()),
                'max_abs_logit_diff_async': float(ps['max_abs_int_async'].max()),
                'max_rel_logit_diff_sync': float(ps['rel_int_sync'].max()),
                'max_rel_logit_diff_async': float(ps['rel_int_async'].max()),
                'async_accumulations': self.op_count}


def _diff_rows(layer: str, mode: str, ref: np.ndarray, got: np.ndarray) -> pd.DataFrame:
    idx = np.argwhere(ref != got)
    return pd.DataFrame({'layer': layer, 'mode': mode, 'window': idx[:, 0], 'sample': idx[:, 1],
                         'channel': idx[:, 2], 'y': idx[:, 3], 'x': idx[:, 4],
                         'integer': ref[tuple(idx.T)].astype(np.int64),
                         'spike_sum': got[tuple(idx.T)].astype(np.int64)})


def equivalence_report(model_or_program, x, strict: bool = False, seed: int = 0,
                       expand: Expander = expand_to_spikes, rtol: float = LOGIT_RTOL,
                       async_rtol: float = ASYNC_RTOL, **async_kwargs) -> EquivalenceReport:
    """Run all three modes on x; strict raises EquivalenceError on any mismatch."""
    program = as_program(model_or_program)
    ref = run_integer(program, x)
    sync = run_sync(program, x, expand)
    event = run_async(program, x, seed=seed, **async_kwargs)
    sync_sums = {r.layer_id: r.window_sums() for r in sync.records}
    rows, diffs = [], []
    for op in program.fire_ops:
        a = ref.activations[op.name]
        s, e = sync_sums[op.name], event.counts[op.name]
        rows.append({'layer': op.name, 'neurons': int(a.size),
                     'sync_matches': int((a == s).sum()), 'async_matches': int((a == e).sum())})
        for mode, got in (('sync_expanded', s), ('async_event', e)):
            if not np.array_equal(a, got):
                diffs.append(_diff_rows(op.name, mode, a, got))
    per_sample = pd.DataFrame({
        'sample': np.arange(ref.logits.shape[0]),
        'max_abs_int_sync': np.abs(ref.logits - sync.logits).max(axis=-1),
        'max_abs_int_async': np.abs(ref.logits - event.logits).max(axis=-1),
        'rel_int_sync': relative_deviation(ref.logits, sync.logits),
        'rel_int_async': relative_deviation(ref.logits, event.logits),
        'rel_sync_async': relative_deviation(sync.logits, event.logits),
    })
    mismatches = pd.concat(diffs, ignore_index=True) if diffs else pd.DataFrame(
        columns=['layer', 'mode', 'window', 'sample', 'channel', 'y', 'x', 'integer', 'spike_sum'])
    report = EquivalenceReport(layers=pd.DataFrame(rows), per_sample=per_sample, mismatches=mismatches,
                               rtol=rtol, async_rtol=async_rtol, op_count=event.op_count)
    logger.info('equivalence: %d/%d layers match, max rel logit diff %.2e (sync) %.2e (async)',
                int(round(report.match_fraction * len(rows))), len(rows),
                per_sample['rel_int_sync'].max(), per_sample['rel_int_async'].max())
    if strict and not report.passed:
        raise EquivalenceError(f'mode mismatch, first at {report.first_divergent_layer}', diff=mismatches)
    return report
