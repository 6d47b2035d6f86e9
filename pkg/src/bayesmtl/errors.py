"""Exception types raised across the package."""


class BayesMTLError(Exception):
    """Base class for all package errors."""


class ShapeError(BayesMTLError, ValueError):
    """Array dimensions are inconsistent."""


class DomainError(BayesMTLError, ValueError):
    """An argument lies outside the domain of the operation."""


class GenerationError(BayesMTLError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class ParseError(BayesMTLError, ValueError):
    """Malformed input file."""


class ArchiveError(BayesMTLError, ValueError):
    """Model archive is corrupted or has an unsupported version."""
