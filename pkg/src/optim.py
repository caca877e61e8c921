"""
AdamW: adaptive moments with decoupled weight decay.
    m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from config import ADAM_BETAS, ADAM_EPS, LR, WEIGHT_DECAY
from src.errors import NonFiniteError, ShapeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamWHyper:
    lr: float = LR
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
                   hyper: AdamWHyper, state: AdamWState) -> dict[str, Tensor]:
    """Update params in place; a missing gradient counts as zero."""
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise ShapeError(f'gradient for unknown parameter {name}')
        if g.shape != params[name].shape:
            raise ShapeError(f'gradient shape {g.shape} != parameter {name} shape {params[name].shape}')
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f'non-finite gradient for {name} at step {state.step + 1}', name=name)

    state.step += 1
    b1, b2 = hyper.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps) + hyper.weight_decay * p.data
        with np.errstate(over='ignore', invalid='ignore'):
            p.data = (p.data - hyper.lr * update).astype(p.data.dtype)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f'parameter {name} left the finite range at step {state.step}', name=name)
    return params


class AdamW:
    """Stateful wrapper over sgd_adamw_step for a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], hyper: AdamWHyper | None = None):
        self.params = params
        self.hyper = hyper or AdamWHyper()
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        sgd_adamw_step(self.params, {k: p.grad for k, p in self.params.items()}, self.hyper, self.state)
