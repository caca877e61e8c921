import numpy as np
import pytest

from src.errors import ParameterError, ShapeError
from src.tensor import (SurrogateSpec, Tensor, cross_entropy, custom_grad, layer_norm, matmul, no_grad,
                        parameter, softmax)
from tests.gradcheck import check_grad


def test_elementwise_and_broadcast_grad(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(1, 3, 1))
    check_grad(lambda x, y: ((x * y + x / (y * y + 2.0)) ** 2).sum(), a, b)


def test_matmul_reductions_grad(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 5))
    check_grad(lambda x, y: matmul(x, y).transpose(0, 2, 1).reshape(2, 15).mean(axis=1).sum(), a, b)


def test_exp_log_relu_softmax_grad(rng):
    a = rng.normal(size=(3, 4))
    check_grad(lambda x: (softmax(x, axis=-1) * x.exp()).sum() + (x * x + 1.0).log().sum(), a)
    a = a + np.sign(a) * 0.1  # keep away from the relu kink
    check_grad(lambda x: x.relu().sum(), a)


def test_layer_norm_grad(rng):
    x = rng.normal(size=(2, 3, 5))
    g = rng.normal(size=(1, 1, 5))
    b = rng.normal(size=(1, 1, 5))
    check_grad(lambda x, g, b: (layer_norm(x, g, b) * layer_norm(x, g, b)).sum(), x, g, b, tol=1e-5)


def test_cross_entropy_value_and_grad(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    t = Tensor(logits, requires_grad=True, dtype=np.float64)
    loss = cross_entropy(t, labels)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert float(loss.data) == pytest.approx(-np.log(p[np.arange(4), labels]).mean())
    loss.backward()
    expected = p.copy()
    expected[np.arange(4), labels] -= 1
    np.testing.assert_allclose(t.grad, expected / 4, atol=1e-12)


def test_shared_subgraph_accumulates(rng):
    x = parameter(rng.normal(size=(3,)))
    y = x * 2.0
    (y * y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 8 * x.data + 2, rtol=1e-6)


def test_rank_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_broadcast_allowed():
    out = Tensor(np.ones((2, 2))) * 3.0
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_no_grad_builds_no_graph():
    x = parameter(np.ones(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y.creator is None
    y.backward()
    assert x.grad is None


def test_surrogate_window_is_closed():
    node = custom_grad(lambda v: np.round(v), SurrogateSpec(lower=0.0, upper=2.0))
    x = Tensor(np.array([-0.5, 0.0, 1.0, 2.0, 2.5]), requires_grad=True, dtype=np.float64)
    node(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 0])


def test_surrogate_spec_validation():
    with pytest.raises(ParameterError):
        SurrogateSpec(lower=1.0, upper=1.0)
    with pytest.raises(ParameterError):
        SurrogateSpec(kind='sigmoid')


def test_float32_default():
    assert Tensor([1, 2, 3]).dtype == np.float32
