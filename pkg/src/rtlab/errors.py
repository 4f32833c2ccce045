"""Exception taxonomy shared across the package."""


class RtlabError(Exception):
    """Base class for all package errors."""


class ShapeError(RtlabError):
    """Operands have incompatible shapes."""


class DomainError(RtlabError):
    """An argument is outside its valid domain (e.g. temperature <= 0)."""


class NumericError(RtlabError):
    """Non-finite values where finite ones are required."""


class ContractError(RtlabError):
    """An operation was called in a way that violates its contract."""


class LayoutError(RtlabError):
    """Parameter-vector layouts do not match."""


class DegenerateDirectionsError(RtlabError):
    """Plane directions are (near-)collinear."""


class DivergenceError(RtlabError):
    """Training loss became non-finite. Carries the last good parameters."""

    def __init__(self, message, last_params=None, log=None):
        super().__init__(message)
        self.last_params = last_params
        self.log = log


class ParseError(RtlabError):
    """Malformed binary dataset or checkpoint file."""


class ConfigError(RtlabError):
    """Invalid experiment configuration."""
