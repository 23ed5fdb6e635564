"""Exception hierarchy shared by every module."""


class ConvShareError(Exception):
    """Base class for all library errors."""


class DimensionError(ConvShareError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ConvShareError, ValueError):
    """A layer, plan or model configuration is inconsistent."""


class StateError(ConvShareError, RuntimeError):
    """An operation ran before the state it needs was produced."""


class InfeasibleError(ConvShareError):
    """A tiling stage does not fit on the optical device.

    ``stage`` names the stage that failed and ``capacity`` carries the
    per-axis channel capacity that was computed for it.
    """

    def __init__(self, message, stage=None, capacity=None):
        super().__init__(message)
        self.stage = stage
        self.capacity = capacity


class CheckpointError(ConvShareError):
    """A checkpoint file is malformed; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class DivergenceError(ConvShareError, RuntimeError):
    """Training produced a non-finite loss."""
