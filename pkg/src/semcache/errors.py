"""Shared exception types."""

from __future__ import annotations


class SemcacheError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(SemcacheError):
    """Bad input: malformed value, dimension mismatch, unknown or duplicate id."""


class RetriableError(SemcacheError):
    """Transient backend failure; the caller may retry."""


class RateLimitError(SemcacheError):
    """Retries exhausted while waiting for a rate-limit permit."""


class ConfigError(SemcacheError):
    """Inconsistent or incomplete configuration."""
