"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its precondition."""


class ConfigurationError(ValueError):
    """Invalid experiment, stream or model configuration."""


class ParseError(ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class DeserializationError(ValueError):
    """Checkpoint bytes are truncated, corrupted, or of an unknown version."""


class AggregationError(ValueError):
    def __init__(self, message, client_id=None):
        self.client_id = client_id
        super().__init__(message)
