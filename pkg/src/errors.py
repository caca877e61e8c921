"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SNNError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SNNError, ValueError):
    """Operand shapes do not agree."""


class ParameterError(SNNError, ValueError):
    """Invalid stride, padding, groups, heads or channel settings."""


class ContractError(SNNError):
    """A value violates an activation or expansion contract."""


class NonFiniteError(SNNError):
    """A gradient, loss or measured matrix became NaN/inf."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name
        self.checkpoint = None  # last good state when raised from a training loop


class ConfigError(SNNError):
    """Invalid model, neuron or experiment configuration."""


class ParseError(SNNError):
    """Malformed input file."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f' at byte {offset}' if offset is not None else ''
        src = f' in {path}' if path is not None else ''
        super().__init__(f'{message}{where}{src}')
        self.offset = offset
        self.path = path


class CheckpointError(SNNError):
    """Unreadable or incompatible checkpoint archive."""


class QueueOverflowError(SNNError):
    """Async event queue exceeded its bound."""

    def __init__(self, layer: str, peak: int, bound: int):
        super().__init__(f'event queue for {layer} overflowed: peak depth {peak} > bound {bound}')
        self.layer = layer
        self.peak = peak
        self.bound = bound


class EquivalenceError(SNNError):
    """Spike sums disagree with integer activations."""

    def __init__(self, message: str, diff=None):
        super().__init__(message)
        self.diff = diff
