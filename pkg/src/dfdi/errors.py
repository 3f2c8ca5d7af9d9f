"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class DfdiError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DfdiError, ValueError):
    """Invalid parameters or configuration."""


class NumericalError(DfdiError, ArithmeticError):
    """Non-finite values, singular matrices and similar numerical failures."""


class IntegrationError(NumericalError):
    """Simulation diverged or produced non-finite states."""


class BoundInapplicableError(NumericalError):
    """The contraction margin of a Wasserstein bound is not positive."""


class DatasetFormatError(DfdiError, IOError):
    """Base class for binary file load errors."""


class HeaderError(DatasetFormatError):
    """Bad magic bytes or unparsable header."""


class DimensionError(DfdiError, ValueError):
    """Array shapes disagree with each other or with a file header."""


class TruncatedError(DatasetFormatError):
    """Payload shorter (or longer) than the header promises."""


class ScenarioMismatchError(DatasetFormatError):
    """File holds a different fault scenario than the caller expected."""
