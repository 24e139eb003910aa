"""Exception hierarchy shared across the package.

Every error carries the process exit code the CLI maps it to: 2 for usage
and configuration problems, 3 for data/validation problems, 4 for numerical
divergence.
"""

from __future__ import annotations


class FewtraceError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigError(FewtraceError):
    """Bad configuration file or incompatible option combination."""

    exit_code = 2


class CorpusParseError(FewtraceError):
    """Malformed JSONL input; carries the 1-based line number."""

    exit_code = 3

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(FewtraceError):
    """Well-formed input that violates a domain invariant."""

    exit_code = 3


class FeaturizationError(FewtraceError):
    """A trace attribute cannot be converted to features."""

    exit_code = 3


class DimensionError(FewtraceError):
    """Tensor shapes do not agree with the declared parameter shapes."""

    exit_code = 3


class SamplingError(FewtraceError):
    """An episode cannot be drawn from the available categories/traces."""

    exit_code = 3


class DivergenceError(FewtraceError):
    """Training or adaptation produced a non-finite loss or gradient."""

    exit_code = 4
