"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration value is outside its allowed range."""


class DomainError(ValueError):
    """An argument is outside the domain of the operation."""


class IntegrityError(RuntimeError):
    """A persisted artifact failed its checksum or structure check."""


class DegenerateRepresentationError(ValueError):
    """A representation carries no usable signal for a metric."""

    def __init__(self, message, metric=None):
        super().__init__(message if metric is None else f"[{metric}] {message}")
        self.metric = metric


class SchemaError(ValueError):
    """A record or table is missing required columns."""


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; carries the offending record."""

    def __init__(self, record):
        super().__init__(f"non-finite loss at step {record.get('step')}: {record}")
        self.record = record
