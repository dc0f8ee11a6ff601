"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value violates a cross-field constraint."""


class InputError(ValueError):
    """Runtime input (labels, probability vectors, ...) is out of range."""


class UsageError(RuntimeError):
    """An API was called in a state it does not support."""


class AggregationError(ValueError):
    """Parameter lists are structurally incompatible at the federation boundary."""
