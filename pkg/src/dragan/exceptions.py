"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DraganError(Exception):
    exit_code = 1


class ContractError(DraganError, ValueError):
    """A caller violated a documented precondition."""

    exit_code = 1


class ConfigError(DraganError, ValueError):
    exit_code = 2


class DataError(DraganError, ValueError):
    """Malformed or inconsistent input data.

    ``lines`` holds the 1-based line numbers that failed validation, when known.
    """

    exit_code = 3

    def __init__(self, message, lines=None):
        super().__init__(message)
        self.lines = list(lines or [])


class NumericDomainError(DraganError, ArithmeticError):
    """NaN or Inf showed up where a finite value was required."""

    exit_code = 4


class NondeterminismError(DraganError, RuntimeError):
    exit_code = 4
