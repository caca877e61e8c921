import numpy as np
import pytest

from src.errors import EquivalenceError, QueueOverflowError, ShapeError
from src.executors import (EventQueue, ExecutionMode, equivalence_report, neumaier_add, run_async,
                           run_integer, run_sync, spike_events, trace_events)
from src.model import build_model
from src.neuron import expand_to_spikes
from src.profiler import count_sops
from src.program import AttentionOp, FireOp, HeadOp, SynapseOp, compile_program
from src.tensor import Tensor, no_grad
from tests.conftest import excite_attention, randomize_bn, tiny_spec


@pytest.fixture
def program(model):
    return compile_program(model)


def test_program_matches_eval_model(model, program, images):
    with no_grad():
        expected = model(Tensor(images)).data
    # float32 training graph vs float64 program: a rare rounding flip may move one sample
    diff = np.abs(run_integer(program, images).logits - expected).max(axis=1)
    assert np.median(diff) < 1e-4


def test_program_structure(program):
    kinds = {type(op) for op in program.ops}
    assert {SynapseOp, FireOp, AttentionOp, HeadOp} <= kinds
    assert isinstance(program.head, HeadOp)
    assert not program.ops[0].spiking
    assert all(op.spiking for op in program.ops[1:] if isinstance(op, SynapseOp))


def test_sync_spike_sums_equal_integer_counts(program, images):
    ref = run_integer(program, images)
    sync = run_sync(program, images)
    for record in sync.records:
        record.validate()
        np.testing.assert_array_equal(record.window_sums(), ref.activations[record.layer_id])
    np.testing.assert_allclose(sync.logits, ref.logits, rtol=1e-6, atol=1e-9)


def test_async_counts_equal_integer_counts(program, images):
    ref = run_integer(program, images)
    event = run_async(program, images, seed=7)
    for name, counts in event.counts.items():
        np.testing.assert_array_equal(counts, ref.activations[name])
    np.testing.assert_allclose(event.logits, ref.logits, rtol=1e-6, atol=1e-9)


def test_async_schedule_seed_does_not_change_logits(program, images):
    a = run_async(program, images, seed=1).logits
    b = run_async(program, images, seed=2).logits
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_equivalence_report_passes(model, images):
    report = equivalence_report(model, images, strict=True, seed=3)
    assert report.passed
    assert report.match_fraction == 1.0
    assert report.first_divergent_layer is None
    summary = report.summary()
    assert summary['passed'] is True
    assert summary['max_rel_logit_diff_sync'] <= 1e-4
    assert summary['async_accumulations'] > 0


def test_dynamic_model_equivalence(rng):
    model = build_model(tiny_spec(t_steps=2)).eval()
    randomize_bn(model, seed=5)
    x = rng.uniform(0, 1, (2, 4, 1, 16, 16))
    report = equivalence_report(model, x, seed=0)
    assert report.passed
    assert run_integer(model, x).window_logits.shape == (2, 4, 3)


def test_binary_spikes_are_bit_identical(rng):
    model = build_model(tiny_spec(d_cap=1)).eval()
    randomize_bn(model, seed=2)
    x = rng.uniform(0, 1, (4, 1, 16, 16))
    program = compile_program(model)
    np.testing.assert_array_equal(run_sync(program, x).logits, run_integer(program, x).logits)


def test_faulty_expansion_is_reported(program, images):
    def drop_all(s, d_cap):
        return np.zeros((d_cap,) + np.shape(s), dtype=np.uint8)

    report = equivalence_report(program, images, expand=drop_all)
    assert not report.passed
    assert report.first_divergent_layer == program.fire_ops[0].name
    assert set(report.mismatches['mode']) == {'sync_expanded'}
    with pytest.raises(EquivalenceError) as info:
        equivalence_report(program, images, strict=True, expand=drop_all)
    assert not info.value.diff.empty


def test_zero_input_emits_no_events(spec):
    model = build_model(spec).eval()
    x = np.zeros((3, 1, 16, 16))
    event = run_async(model, x, trace=True)
    assert event.op_count == 0
    assert event.trace.empty
    head_bias = model.head.params['bias'].data.reshape(-1)
    np.testing.assert_allclose(event.logits, np.broadcast_to(head_bias, (3, 3)), atol=1e-7)


def test_queue_overflow(program, images):
    with pytest.raises(QueueOverflowError) as info:
        run_async(program, images, queue_bound=1)
    assert info.value.peak > info.value.bound == 1


def test_async_accumulations_equal_sop_count(program, images):
    event = run_async(program, images, seed=11)
    sops = count_sops(run_sync(program, images).records, program)
    assert event.ops_by_layer == sops
    table = event.summary()
    assert list(table.columns) == ['layer', 'accumulations', 'events', 'peak_queue']
    assert int(table['accumulations'].sum()) == event.op_count


def test_trace_lists_every_spike(program, images):
    event = run_async(program, images, trace=True)
    by_layer = event.trace.groupby('layer').size()
    for name, counts in event.counts.items():
        assert by_layer.get(name, 0) == int(counts.sum())
    first = trace_events(event.trace.head(3))
    assert all(ev.polarity == 1 and 0 <= ev.micro_step < 4 for ev in first)


def test_spike_events_front_loaded():
    s = np.array([[[[2, 0], [1, 3]]]])
    ev = spike_events(s, 3)
    assert len(ev) == 6
    assert list(ev[:, 4]) == sorted(ev[:, 4])
    per_neuron = {}
    for n, c, y, x, step in ev:
        per_neuron.setdefault((y, x), []).append(step)
    assert per_neuron == {(0, 0): [0, 1], (1, 0): [0], (1, 1): [0, 1, 2]}


def test_event_queue_releases_one_micro_step_at_a_time():
    q = EventQueue('layer', bound=2)
    q.offer(np.array([[0, 0], [1, 0], [2, 1], [3, 2], [4, 2]]))
    assert q.depth == 2 and not q.exhausted
    np.testing.assert_array_equal(q.pop(1), [[0, 0]])
    assert q.depth == 1
    np.testing.assert_array_equal(q.pop(1), [[1, 0]])
    assert q.depth == 1
    np.testing.assert_array_equal(q.pop(1), [[2, 1]])
    np.testing.assert_array_equal(q.pop(2), [[3, 2], [4, 2]])
    assert q.exhausted and q.peak == 2 and q.events == 5


@pytest.mark.parametrize('d_cap', [4, 8, 16])
def test_saturating_input_fits_the_default_bound(d_cap):
    model = build_model(tiny_spec(d_cap=d_cap)).eval()
    randomize_bn(model)
    x = np.ones((2, 1, 16, 16))
    ref = run_integer(model, x)
    event = run_async(model, x, seed=d_cap)
    for name, counts in event.counts.items():
        np.testing.assert_array_equal(counts, ref.activations[name])
    np.testing.assert_allclose(event.logits, ref.logits, rtol=1e-6, atol=1e-9)
    for name, counts in event.counts.items():
        neurons = counts[0].size
        for consumer in compile_program(model).consumers(name):
            assert event.peak_queue.get(consumer.name, 0) <= neurons


def test_attention_path_with_spikes(rng):
    for t_steps in (1, 2):
        model = build_model(tiny_spec(t_steps=t_steps)).eval()
        randomize_bn(model)
        excite_attention(model)
        program = compile_program(model)
        shape = (6, 1, 16, 16) if t_steps == 1 else (2, 6, 1, 16, 16)
        x = rng.uniform(0.0, 1.0, shape)
        attn = next(op.name for op in program.fire_ops if op.name.endswith('sn_attn'))
        ref = run_integer(program, x)
        assert ref.activations[attn].sum() > 0
        report = equivalence_report(program, x, strict=True, seed=t_steps)
        assert report.passed
        event = run_async(program, x, seed=9)
        np.testing.assert_array_equal(event.counts[attn], ref.activations[attn])
        sops = count_sops(run_sync(program, x).records, program)
        assert event.ops_by_layer == sops
        proj = [op.name for op in program.consumers(attn)]
        assert all(sops[name] > 0 for name in proj)

def test_event_queue_fifo_and_peak():
    q = EventQueue('layer', bound=4)
    q.push(np.arange(6).reshape(3, 2))
    np.testing.assert_array_equal(q.pop(2), [[0, 1], [2, 3]])
    q.push(np.arange(4).reshape(2, 2) + 10)
    assert q.depth == 3 and q.peak == 3
    np.testing.assert_array_equal(q.pop(5)[0], [4, 5])
    with pytest.raises(QueueOverflowError):
        q.push(np.zeros((5, 2)))


def test_neumaier_recovers_lost_low_bits():
    acc, comp = np.array([1e16]), np.zeros(1)
    for term in (1.0, 1.0, -1e16):
        acc, comp = neumaier_add(acc, comp, np.array([term]))
    assert (acc + comp)[0] == 2.0


def test_input_shape_checked(program):
    with pytest.raises(ShapeError):
        run_integer(program, np.zeros((2, 2, 1, 16, 16)))
    with pytest.raises(ShapeError):
        run_sync(program, np.zeros((2, 3, 16, 16)))


def test_mode_aliases():
    assert ExecutionMode.parse('sync') is ExecutionMode.SYNC_EXPANDED
    assert ExecutionMode.parse('async') is ExecutionMode.ASYNC_EVENT
    assert ExecutionMode.parse('integer') is ExecutionMode.INTEGER
    with pytest.raises(ValueError):
        ExecutionMode.parse('batched')


def test_expand_default_used_by_sync(program, images):
    custom = run_sync(program, images, expand=expand_to_spikes)
    np.testing.assert_array_equal(custom.logits, run_sync(program, images).logits)
