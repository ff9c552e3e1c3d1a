"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """A numeric or structural argument is outside its allowed domain."""


class InfeasibleError(ValueError):
    """The requested guarantee cannot be met (e.g. target delta below the RDP delta)."""


class UnsupportedOrderError(ValueError):
    """An accounting routine was asked for a Renyi order it cannot evaluate."""


class IngestionError(ValueError):
    """A corpus record failed validation."""

    def __init__(self, message, record_id=None, line=None):
        self.record_id = record_id
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if record_id is not None:
            prefix.append(f"record {record_id}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)


class PartitionError(ValueError):
    """Retrieved examples cannot be split into the requested shard layout."""


class BudgetViolationError(RuntimeError):
    """A charge would push a record past its privacy budget."""


class LLMError(RuntimeError):
    """Base class for language-model client failures."""

    def __init__(self, message, query_id=None, shard=None):
        self.query_id = query_id
        self.shard = shard
        super().__init__(message)


class TransportError(LLMError):
    """Retries against the completion endpoint were exhausted."""


class ClientError(LLMError):
    """The endpoint rejected the request with a non-retryable status."""


class MockParseError(LLMError):
    """A mock model could not parse the prompt it was handed."""
