"""Shared exception types."""


class DpdError(Exception):
    """Base class for all package errors."""


class ShapeError(DpdError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(DpdError):
    """Invalid configuration value (bad enum, out-of-range hyperparameter, ...)."""


class CapacityError(DpdError):
    """Scene generator could not place the requested heads (overcrowded spec)."""


class SamplingError(DpdError):
    """Degenerate sample set (e.g. single-class split in the divergence probe)."""


class UndefinedMetricError(DpdError):
    """Metric requested on an empty value collection."""


class NonFiniteLossError(DpdError):
    """Loss evaluated to NaN/Inf during a gradient check."""
