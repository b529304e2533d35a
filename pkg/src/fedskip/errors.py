"""Exception types raised across the package."""


class FedSkipError(Exception):
    """Base class for all package errors."""


class ShapeError(FedSkipError, ValueError):
    """Input tensor does not match what the model expects."""


class LayoutError(FedSkipError, ValueError):
    """Two parameter vectors do not share a layout."""


class EmptyDatasetError(FedSkipError, ValueError):
    pass


class DataFormatError(FedSkipError, ValueError):
    """A dataset file is malformed (bad magic, truncated, wrong width...)."""


class ConsistencyError(FedSkipError, ValueError):
    pass


class ConfigError(FedSkipError, ValueError):
    """Experiment configuration failed parsing or validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
