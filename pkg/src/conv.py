"""
Convolution and batch normalization on NCHW tensors.

conv2d is cross-correlation over strided K x K windows, grouped:
    y[n, g*Cog + o, h, w] = sum_{c,i,j} x_pad[n, g*Cg + c, h*s + i, w*s + j] * W[g*Cog + o, c, i, j] + b
The raw-array kernels are shared with the inference executors.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import BN_EPS, BN_MOMENTUM
from src.errors import ParameterError, ShapeError
from src.tensor import Function, Tensor


def output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def check_conv_args(x_shape: tuple, w_shape: tuple, stride: int, padding: int, groups: int) -> None:
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f'conv2d expects 4-d input and kernel, got {x_shape} and {w_shape}')
    if stride < 1 or padding < 0 or groups < 1:
        raise ParameterError(f'invalid stride={stride}, padding={padding}, groups={groups}')
    n, c, h, w = x_shape
    cout, cin_g, kh, kw = w_shape
    if kh != kw or kh % 2 == 0:
        raise ParameterError(f'kernel must be square with odd size, got {kh}x{kw}')
    if c % groups or cout % groups:
        raise ParameterError(f'channels {c}->{cout} not divisible by groups={groups}')
    if cin_g != c // groups:
        raise ShapeError(f'kernel expects {cin_g} input channels per group, input gives {c // groups}')
    if output_size(h, kh, stride, padding) < 1 or output_size(w, kw, stride, padding) < 1:
        raise ParameterError(f'kernel {kh} with padding {padding} does not fit input {h}x{w}')


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, Ho, Wo, K, K) strided view of the zero-padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                   stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    check_conv_args(x.shape, w.shape, stride, padding, groups)
    n, c = x.shape[:2]
    cout, cin_g, k, _ = w.shape
    win = _windows(x, k, stride, padding)
    ho, wo = win.shape[2:4]
    win = win.reshape(n, groups, cin_g, ho, wo, k, k)
    wg = w.reshape(groups, cout // groups, cin_g, k, k)
    y = np.einsum('ngchwij,gocij->ngohw', win, wg, optimize=True).reshape(n, cout, ho, wo)
    if b is not None:
        y = y + b.reshape(1, cout, 1, 1)
    return y


class Conv2d(Function):
    def forward(self, x, w, b=None, stride=1, padding=0, groups=1):
        self.x, self.w = x, w
        self.has_bias = b is not None
        self.stride, self.padding, self.groups = stride, padding, groups
        return conv2d_forward(x, w, b, stride, padding, groups)

    def backward(self, grad):
        x, w = self.x, self.w
        s, p, g = self.stride, self.padding, self.groups
        n, c, h, wd = x.shape
        cout, cin_g, k, _ = w.shape
        ho, wo = grad.shape[2:]
        gy = grad.reshape(n, g, cout // g, ho, wo)
        wg = w.reshape(g, cout // g, cin_g, k, k)

        win = _windows(x, k, s, p).reshape(n, g, cin_g, ho, wo, k, k)
        dw = np.einsum('ngchwij,ngohw->gocij', win, gy, optimize=True).reshape(w.shape)

        dcols = np.einsum('ngohw,gocij->ngchwij', gy, wg, optimize=True).reshape(n, c, ho, wo, k, k)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j]
        dx = dxp[:, :, p:p + h, p:p + wd]

        if self.has_bias:
            return dx, dw, grad.sum(axis=(0, 2, 3))
        return dx, dw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    if b is None:
        return Conv2d.apply(x, w, stride=stride, padding=padding, groups=groups)
    if b.shape != (w.shape[0],):
        raise ShapeError(f'bias shape {b.shape} does not match {w.shape[0]} output channels')
    return Conv2d.apply(x, w, b, stride=stride, padding=padding, groups=groups)


class BatchNorm(Function):
    """
    Per-channel normalization over (N, H, W).
    With a mask (N, 1, H, W), batch statistics use active positions only.
    """

    def forward(self, x, gamma, beta, running_mean, running_var, training=True,
                momentum=BN_MOMENTUM, eps=BN_EPS, mask=None):
        if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f'batchnorm parameters {gamma.shape}/{beta.shape} do not match input {x.shape}')
        axes = (0, 2, 3)
        self.gamma = gamma
        self.mask = None
        count = x.shape[0] * x.shape[2] * x.shape[3] if mask is None else float(mask.sum())
        self.training = training and count > 0

        if self.training:
            if mask is None:
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
            else:
                self.mask = mask.astype(x.dtype)
                mean = (x * self.mask).sum(axis=axes) / count
                var = (((x - mean.reshape(1, -1, 1, 1)) ** 2) * self.mask).sum(axis=axes) / count
            unbiased = var * count / (count - 1) if count > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
            self.count = count
        else:
            mean, var = running_mean, running_var

        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, -1, 1, 1)
        self.xhat = (x - np.asarray(mean, dtype=x.dtype).reshape(1, -1, 1, 1)) * self.inv_std
        return self.xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)

    def backward(self, grad):
        axes = (0, 2, 3)
        dgamma = (grad * self.xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * self.gamma.reshape(1, -1, 1, 1)
        if not self.training:
            return dxhat * self.inv_std, dgamma, dbeta
        m = 1.0 if self.mask is None else self.mask
        mean_dxhat = (dxhat * m).sum(axis=axes, keepdims=True) / self.count
        mean_dxhat_xhat = (dxhat * self.xhat * m).sum(axis=axes, keepdims=True) / self.count
        dx = self.inv_std * (dxhat - mean_dxhat - self.xhat * mean_dxhat_xhat)
        if self.mask is not None:
            dx = dx * m + (1.0 - m) * dxhat * self.inv_std
        return dx, dgamma, dbeta


def batchnorm(x: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              gamma: Tensor, beta: Tensor, training: bool,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
              mask: np.ndarray | None = None) -> Tensor:
    """Running stats are updated in place when training."""
    return BatchNorm.apply(x, gamma, beta, running_mean=running_mean, running_var=running_var,
                           training=training, momentum=momentum, eps=eps, mask=mask)


def fold_bn(w: np.ndarray, b: np.ndarray | None, gamma: np.ndarray, beta: np.ndarray,
            running_mean: np.ndarray, running_var: np.ndarray,
            eps: float = BN_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Absorb eval-mode BN into the preceding conv: returns (W', b')."""
    scale: np.ndarray = gamma / np.sqrt(running_var + eps)
    bias = np.zeros_like(running_mean) if b is None else b
    w_folded = w * scale.reshape(-1, *([1] * (w.ndim - 1)))
    b_folded = (bias - running_mean) * scale + beta
    return w_folded, b_folded
