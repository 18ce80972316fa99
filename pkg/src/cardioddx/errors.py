"""Exception types shared across the package."""


class CardioDdxError(Exception):
    """Base class for all package errors."""


class ValidationError(CardioDdxError):
    """Input data violates a documented precondition."""


class ConfigError(CardioDdxError):
    """Bad configuration value or file."""


class TemplateError(CardioDdxError):
    """Missing template or unbound placeholder."""


class TransportError(CardioDdxError):
    """Network-level failure talking to a backend. Retryable."""


class ProtocolError(CardioDdxError):
    """Backend reachable but the reply violates the wire contract. Not retryable."""


class ParseError(CardioDdxError):
    """A structured payload could not be extracted from model output."""


class StageError(CardioDdxError):
    """A pipeline stage failed; carries the partial trace."""

    def __init__(self, stage, message, trace=None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message
        self.trace = trace if trace is not None else []
