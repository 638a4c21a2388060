"""Exception types raised across the laboratory."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class InsufficientFlightsError(DomainError):
    """A time horizon extends past the last recorded collision."""


class EmptyBinError(DomainError):
    """Equal-count binning produced a bin without samples.

    ``counts`` holds the per-bin sample counts so callers can pick a
    coarser binning.
    """

    def __init__(self, message: str, counts: list[int]) -> None:
        super().__init__(message)
        self.counts = counts


class ConfigurationError(ValueError):
    """Invalid experiment or lattice configuration.

    ``diagnostics`` maps each offending field to a human-readable message.
    """

    def __init__(self, message: str, diagnostics: dict[str, str] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CalibrationError(RuntimeError):
    """A kernel backend could not satisfy its calibration constraints."""


class QuadratureError(RuntimeError):
    """Stein-equation quadrature failed its residual check."""

    def __init__(self, message: str, max_residual: float, worst_probe: list[float]) -> None:
        super().__init__(message)
        self.max_residual = max_residual
        self.worst_probe = worst_probe
