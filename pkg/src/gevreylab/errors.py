"""Exception types shared across the lab."""

from __future__ import annotations


class GevreyLabError(Exception):
    """Base class for all lab errors."""


class GridError(GevreyLabError):
    """Invalid grid parameters."""


class GridMismatchError(GevreyLabError):
    """Operands live on different wavenumber grids."""


class UnreliableWeightError(GevreyLabError):
    """An exponential weight would amplify round-off past the trust threshold.

    Carries the largest admissible weight parameter so callers can back off.
    """

    def __init__(self, message: str, admissible_max: float):
        super().__init__(message)
        self.admissible_max = admissible_max


class SingularPointError(GevreyLabError):
    """Closed-form evaluation requested at a singular point."""


class BlowUpError(GevreyLabError):
    """Time integration lost stability (norm grew past the guard)."""

    def __init__(self, message: str, time: float, norm_ratio: float):
        super().__init__(message)
        self.time = time
        self.norm_ratio = norm_ratio


class PicardDivergenceError(GevreyLabError):
    """Fixed-point iteration diverged (difference norms grew repeatedly)."""

    def __init__(self, message: str, history):
        super().__init__(message)
        self.history = history


class ConfigError(GevreyLabError):
    """Scenario file is malformed or out of range."""


class SnapshotFormatError(GevreyLabError):
    """Snapshot file failed validation (magic, version, or payload length)."""
