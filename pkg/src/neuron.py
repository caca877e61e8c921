"""
Spiking-neuron dynamics and the integer fire function.

Binary neuron, one step:
    U[t] = beta * H[t-1] + X[t]
    S[t] = Heaviside(U[t] - V_th)
    H[t] = U[t]                              (no reset)
           U[t] * (1 - S[t]) + V_reset * S[t] (hard)
           U[t] - V_th * S[t]                (soft)

Integer fire with cap D:
    Fire_D(U) = floor(clip(U, 0, D) + 0.5)
An IF neuron with soft reset and unit threshold, driven once by U + 0.5 and
then left alone for D steps, emits exactly Fire_D(U) spikes, all at the front.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from config import BETA, D_CAP, RESET_MODE, T_STEPS, V_RESET, V_TH
from src.errors import ConfigError, ContractError, ShapeError
from src.tensor import SurrogateSpec, Tensor, custom_grad

logger = logging.getLogger(__name__)

RESET_MODES = ('none', 'hard', 'soft')


@dataclass(frozen=True)
class NeuronConfig:
    beta: float = BETA
    v_th: float = V_TH
    v_reset: float = V_RESET
    reset_mode: str = RESET_MODE
    d_cap: int = D_CAP
    t_steps: int = T_STEPS

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f'beta must lie in (0, 1], got {self.beta}')
        if self.v_th <= 0:
            raise ConfigError(f'v_th must be positive, got {self.v_th}')
        if self.reset_mode not in RESET_MODES:
            raise ConfigError(f'reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}')
        if int(self.d_cap) != self.d_cap or self.d_cap < 1:
            raise ConfigError(f'd_cap must be a positive integer, got {self.d_cap}')
        if int(self.t_steps) != self.t_steps or self.t_steps < 1:
            raise ConfigError(f't_steps must be a positive integer, got {self.t_steps}')

    @property
    def kind(self) -> str:
        """IF when beta == 1, LIF otherwise."""
        return 'IF' if self.beta == 1.0 else 'LIF'

    @property
    def label(self) -> str:
        suffix = {'none': 'NR', 'hard': 'HR', 'soft': 'SR'}[self.reset_mode]
        return f'{self.kind}-{suffix}'


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x >= 0).astype(x.dtype)


def step_dynamics(cfg: NeuronConfig, h_prev: np.ndarray, x_t: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One binary-neuron step; returns (u, s, h)."""
    h_prev = np.asarray(h_prev, dtype=np.result_type(h_prev, x_t, np.float32))
    x_t = np.asarray(x_t, dtype=h_prev.dtype)
    if h_prev.shape != x_t.shape:
        raise ShapeError(f'membrane {h_prev.shape} and input {x_t.shape} differ')
    u: np.ndarray = cfg.beta * h_prev + x_t
    s: np.ndarray = heaviside(u - cfg.v_th)
    return u, s, carry_membrane(cfg, u, s)


def carry_membrane(cfg: NeuronConfig, u, s):
    """Post-fire membrane under cfg.reset_mode; s may be binary or an integer count."""
    if cfg.reset_mode == 'none':
        return u
    if cfg.reset_mode == 'soft':
        return u - s * cfg.v_th
    if isinstance(s, Tensor):
        fired = Tensor((s.data > 0).astype(s.dtype))
    else:
        fired = (np.asarray(s) > 0).astype(np.asarray(u).dtype if not isinstance(u, Tensor) else u.dtype)
    return u * (1.0 - fired) + fired * cfg.v_reset


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + np.asarray(0.5, dtype=x.dtype))


def _fire_array(u: np.ndarray, d_cap: int) -> np.ndarray:
    return round_half_up(np.clip(u, 0, d_cap).astype(u.dtype, copy=False))


_fire_nodes: dict[int, object] = {}


def fire_d(u, d_cap: int):
    """round(clip(u, 0, D)), half up; Tensors get the [0, D] rectangular surrogate."""
    if d_cap < 1:
        raise ContractError(f'd_cap must be >= 1, got {d_cap}')
    if not isinstance(u, Tensor):
        return _fire_array(np.asarray(u, dtype=np.result_type(u, np.float32)), d_cap)
    node = _fire_nodes.get(d_cap)
    if node is None:
        node = _fire_nodes[d_cap] = custom_grad(lambda x: _fire_array(x, d_cap),
                                                SurrogateSpec(lower=0.0, upper=float(d_cap)))
    return node(u)


def check_integer_activation(s: np.ndarray, d_cap: int, where: str = 'activation') -> None:
    if not np.all((s >= 0) & (s <= d_cap)):
        raise ContractError(f'{where}: values outside [0, {d_cap}]')
    if not np.array_equal(s, np.floor(s)):
        raise ContractError(f'{where}: non-integer values')


def expand_to_spikes(s_int: np.ndarray, d_cap: int) -> np.ndarray:
    """Front-loaded binary train of shape (D, *s.shape): value n -> n ones then zeros."""
    s_int = np.asarray(s_int)
    check_integer_activation(s_int, d_cap, 'expand_to_spikes')
    steps = np.arange(d_cap).reshape(-1, *([1] * s_int.ndim))
    return (steps < s_int[None]).astype(np.uint8)


def if_sr_emit(u: np.ndarray, d_cap: int) -> np.ndarray:
    """Run unit-threshold IF-SR for D steps on u + 0.5 injected at step 1."""
    u = np.asarray(u, dtype=np.result_type(u, np.float32))
    cfg = NeuronConfig(beta=1.0, v_th=1.0, reset_mode='soft', d_cap=d_cap)
    h: np.ndarray = np.zeros_like(u)
    drive: np.ndarray = u + np.asarray(0.5, dtype=u.dtype)
    quiet: np.ndarray = np.zeros_like(u)
    spikes = np.empty((d_cap,) + u.shape, dtype=np.uint8)
    for d in range(d_cap):
        _, s, h = step_dynamics(cfg, h, drive if d == 0 else quiet)
        spikes[d] = s
    return spikes


def forward_error(u: np.ndarray, d_cap: int) -> np.ndarray:
    """ReLU(u) - Fire_D(u) / D."""
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(u, 0.0) - _fire_array(u, d_cap) / d_cap


def forward_error_piecewise(u: np.ndarray, d_cap: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    inside = u - round_half_up(u) / d_cap
    return np.where(u < 0, 0.0, np.where(u < d_cap, inside, u - 1.0))


def backward_error(u: np.ndarray, d_cap: int) -> np.ndarray:
    """0 below zero, u - round(u)/D inside [0, D), 1 at or above D."""
    u = np.asarray(u, dtype=np.float64)
    inside = u - round_half_up(u) / d_cap
    return np.where(u < 0, 0.0, np.where(u < d_cap, inside, 1.0))


def rate_quantization_error(u: np.ndarray, d_cap: int) -> np.ndarray:
    """Rate-space rounding error (clip(u) - Fire_D(u)) / D; magnitude peaks at 1/(2D)."""
    u = np.asarray(u, dtype=np.float64)
    clipped = np.clip(u, 0, d_cap)
    return (clipped - round_half_up(clipped)) / d_cap


@dataclass(frozen=True)
class ResetPhase:
    """Dynamics in force at one global micro-step t in [1, T*D]."""
    window: int
    micro_step: int
    in_window_threshold: float
    in_window_reset: str
    boundary_reset: str | None  # set on the last micro-step of a window that carries state forward

    @property
    def is_boundary(self) -> bool:
        return self.boundary_reset is not None


def hybrid_reset_schedule(cfg: NeuronConfig, t_global: int) -> ResetPhase:
    total = cfg.t_steps * cfg.d_cap
    if not 1 <= t_global <= total:
        raise ContractError(f't_global must lie in [1, {total}], got {t_global}')
    window = (t_global - 1) // cfg.d_cap + 1
    micro = (t_global - 1) % cfg.d_cap + 1
    boundary = micro == cfg.d_cap and window < cfg.t_steps
    return ResetPhase(window=window, micro_step=micro, in_window_threshold=1.0,
                      in_window_reset='soft', boundary_reset=cfg.reset_mode if boundary else None)


def simulate_hybrid(cfg: NeuronConfig, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Full T x D micro-step run for inputs of shape (T, ...).

    Returns spikes (T*D, ...) and the membrane carried out of each window (T, ...).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] != cfg.t_steps:
        raise ShapeError(f'expected {cfg.t_steps} windows, got {inputs.shape[0]}')
    unit = NeuronConfig(beta=1.0, v_th=1.0, reset_mode='soft', d_cap=cfg.d_cap)
    shape = inputs.shape[1:]
    spikes = np.zeros((cfg.t_steps * cfg.d_cap,) + shape, dtype=np.uint8)
    carried = np.zeros_like(inputs)
    h: np.ndarray = np.zeros(shape)
    inner: np.ndarray = np.zeros(shape)
    u: np.ndarray = np.zeros(shape)
    count: np.ndarray = np.zeros(shape)
    for t_global in range(1, cfg.t_steps * cfg.d_cap + 1):
        phase = hybrid_reset_schedule(cfg, t_global)
        if phase.micro_step == 1:
            u = cfg.beta * h + inputs[phase.window - 1]
            drive = u / cfg.v_th + 0.5
            inner, count = np.zeros(shape), np.zeros(shape)
        else:
            drive = np.zeros(shape)
        _, s, inner = step_dynamics(unit, inner, drive)
        spikes[t_global - 1] = s
        count += s
        if phase.micro_step == cfg.d_cap:
            # boundary rule; the last window reports the state it would carry
            h = carry_membrane(cfg, u, count)
            carried[phase.window - 1] = h
    return spikes, carried


@dataclass
class SpikeRecord:
    """Binary spikes of one SN layer over T*D micro-steps: shape (T*D, N, ...features)."""
    layer_id: str
    spikes: np.ndarray
    d_cap: int
    t_steps: int = 1

    @property
    def firing_rate_map(self) -> np.ndarray:
        """Channel-mean firing per step: (T*D, N, H, W) for spatial layers."""
        if self.spikes.ndim >= 5:
            return self.spikes.mean(axis=2)
        return self.spikes.astype(np.float64)

    def window_sums(self) -> np.ndarray:
        """Integer activation per window: (T, N, ...)."""
        s = self.spikes.reshape((self.t_steps, self.d_cap) + self.spikes.shape[1:])
        return s.sum(axis=1, dtype=np.int64)

    def front_loaded(self) -> bool:
        s = self.spikes.reshape((self.t_steps, self.d_cap) + self.spikes.shape[1:])
        return not np.any((s[:, :-1] == 0) & (s[:, 1:] == 1))

    def validate(self) -> None:
        if self.spikes.shape[0] != self.t_steps * self.d_cap:
            raise ContractError(f'{self.layer_id}: {self.spikes.shape[0]} steps, expected {self.t_steps * self.d_cap}')
        if not np.all((self.spikes == 0) | (self.spikes == 1)):
            raise ContractError(f'{self.layer_id}: non-binary spikes')
        if not self.front_loaded():
            raise ContractError(f'{self.layer_id}: spike train is not front-loaded')
