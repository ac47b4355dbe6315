from __future__ import annotations

from typing import Any, Dict, Mapping, Optional


class PlacedropError(Exception):
    """Base class for all errors raised by placedrop"""


class ShapeError(PlacedropError, ValueError):
    """The extents of two operands cannot be reconciled"""


class ContractError(PlacedropError, RuntimeError):
    """A precondition of an operation was violated by its caller"""


class ConfigError(PlacedropError, ValueError):
    """A configuration is invalid

    Parameters:
        fields:
            Maps each offending dotted key to a human readable complaint.
    """

    def __init__(self, fields: Mapping[str, str]) -> None:
        self.fields: Dict[str, str] = dict(fields)
        lines = [f"{key}: {why}" for key, why in sorted(self.fields.items())]
        super().__init__("Invalid configuration\n  " + "\n  ".join(lines))


class NumericalError(PlacedropError, FloatingPointError):
    """A non-finite value appeared where a finite one is required

    The ``context`` records where it happened (run, stage, epoch, iteration, op...).
    """

    def __init__(self, message: str, context: Optional[Mapping[str, Any]] = None):
        self.context: Dict[str, Any] = dict(context or {})
        if self.context:
            where = ", ".join(f"{k}={v}" for k, v in self.context.items())
            message = f"{message} ({where})"
        super().__init__(message)


class GradientCheckError(PlacedropError, AssertionError):
    """An analytic gradient disagreed with its finite difference estimate"""

    def __init__(self, op: str, max_relative_error: float, tolerance: float) -> None:
        self.op = op
        self.max_relative_error = max_relative_error
        self.tolerance = tolerance
        super().__init__(
            f"Gradient check failed for {op!r} - max relative error "
            f"{max_relative_error:.3e} exceeds {tolerance:.0e}"
        )
