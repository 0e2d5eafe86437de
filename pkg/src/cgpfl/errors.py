"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration: bad field values, inconsistent dimensions."""


class IdxFormatError(ValueError):
    """Malformed IDX file: wrong magic number or inconsistent counts."""


class ClassExhaustedError(RuntimeError):
    """A class pool ran out of samples during disjoint partitioning."""

    def __init__(self, label: int, needed: int, available: int):
        self.label = label
        self.needed = needed
        self.available = available
        super().__init__(
            f"class {label} exhausted: needed {needed} more samples, "
            f"only {available} left in the pool"
        )


class NumericalError(RuntimeError):
    """Non-finite value produced during training; carries run context."""

    def __init__(self, message: str, **context):
        self.context = dict(context)
        if self.context:
            where = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            message = f"{message} ({where})"
        super().__init__(message)
