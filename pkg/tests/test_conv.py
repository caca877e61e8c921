import numpy as np
import pytest

from src.conv import batchnorm, conv2d, conv2d_forward, fold_bn, output_size
from src.errors import ParameterError, ShapeError
from src.tensor import Tensor
from tests.gradcheck import check_grad


def reference_conv(x, w, b, stride, padding, groups):
    n, c, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = output_size(h, k, stride, padding), output_size(wd, k, stride, padding)
    y = np.zeros((n, cout, ho, wo))
    per_group = cout // groups
    for o in range(cout):
        g = o // per_group
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, g * cin_g:(g + 1) * cin_g, i * stride:i * stride + k, j * stride:j * stride + k]
                y[:, o, i, j] = (patch * w[o]).sum(axis=(1, 2, 3)) + b[o]
    return y


@pytest.mark.parametrize('stride,padding,groups', [(1, 1, 1), (2, 1, 1), (1, 1, 4), (1, 0, 2)])
def test_forward_matches_loops(rng, stride, padding, groups):
    x = rng.normal(size=(2, 4, 7, 6))
    w = rng.normal(size=(8, 4 // groups, 3, 3))
    b = rng.normal(size=8)
    np.testing.assert_allclose(conv2d_forward(x, w, b, stride, padding, groups),
                               reference_conv(x, w, b, stride, padding, groups), atol=1e-12)


@pytest.mark.parametrize('stride,groups', [(1, 1), (2, 1), (1, 2)])
def test_conv_grad(rng, stride, groups):
    x = rng.normal(size=(2, 4, 5, 5))
    w = rng.normal(size=(4, 4 // groups, 3, 3))
    b = rng.normal(size=4)
    check_grad(lambda x, w, b: (conv2d(x, w, b, stride, 1, groups) ** 2).sum(), x, w, b, tol=1e-5)


def test_batchnorm_grad_training(rng):
    x = rng.normal(size=(3, 2, 4, 4))
    g = rng.uniform(0.5, 1.5, size=2)
    b = rng.normal(size=2)

    def build(x, g, b):
        y = batchnorm(x, np.zeros(2), np.ones(2), g, b, training=True)
        return (y * y * y).sum()
    check_grad(build, x, g, b, tol=1e-5)


def test_masked_batchnorm_uses_active_positions(rng):
    x = rng.normal(size=(2, 1, 4, 4))
    mask = np.zeros((2, 1, 4, 4))
    mask[:, :, :2] = 1
    rm, rv = np.zeros(1), np.ones(1)
    batchnorm(Tensor(x, dtype=np.float64), rm, rv, Tensor(np.ones(1)), Tensor(np.zeros(1)),
              training=True, momentum=1.0, mask=mask)
    assert rm[0] == pytest.approx(x[:, :, :2].mean())


def test_fold_bn_matches_eval_batchnorm(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    gamma, beta = rng.uniform(0.5, 2, 4), rng.normal(size=4)
    mean, var = rng.normal(size=4), rng.uniform(0.5, 2, 4)
    y = conv2d_forward(x, w, b, 1, 1)
    expected = batchnorm(Tensor(y, dtype=np.float64), mean.copy(), var.copy(), Tensor(gamma), Tensor(beta),
                         training=False).data
    wf, bf = fold_bn(w, b, gamma, beta, mean, var)
    np.testing.assert_allclose(conv2d_forward(x, wf, bf, 1, 1), expected, atol=1e-10)


def test_argument_errors():
    x = np.zeros((1, 4, 5, 5))
    with pytest.raises(ParameterError):
        conv2d_forward(x, np.zeros((4, 4, 2, 2)))
    with pytest.raises(ParameterError):
        conv2d_forward(x, np.zeros((6, 2, 3, 3)), groups=4)
    with pytest.raises(ParameterError):
        conv2d_forward(x, np.zeros((4, 4, 3, 3)), stride=0)
    with pytest.raises(ShapeError):
        conv2d_forward(x, np.zeros((4, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(x), Tensor(np.zeros((4, 4, 3, 3))), Tensor(np.zeros(3)))
