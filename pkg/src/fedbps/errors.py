"""Exception hierarchy shared across the package."""


class FedBPSError(Exception):
    """Base class for all errors raised by this package."""


class SpecError(FedBPSError):
    """A network description does not compose."""


class ShapeError(FedBPSError):
    """Input data does not fit the network at a given layer."""


class AlignmentError(FedBPSError):
    """Two parameter-aligned objects disagree on names or shapes."""


class ConfigError(FedBPSError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class NumericalError(FedBPSError, FloatingPointError):
    """A computation produced NaN or Inf."""


class LoadError(FedBPSError):
    """A dataset file is missing, malformed or truncated."""


class PartitionError(FedBPSError):
    """A partition plan cannot be satisfied by the available samples."""


class EmptyDatasetError(FedBPSError, ValueError):
    """An operation that needs at least one sample received none."""
