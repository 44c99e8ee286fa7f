"""Semantic-aware caching engine and tool-call proxy for agent workloads."""

from .engine import CacheEngine, LookupOutcome, cal_score
from .errors import (
    ConfigError,
    RateLimitError,
    RetriableError,
    SemcacheError,
    ValidationError,
)
from .model import (
    CacheConfig,
    EmbeddingVector,
    SemanticElement,
    SemanticKey,
    make_element,
    token_count,
)

__version__ = "0.1.0"

__all__ = [
    "CacheConfig",
    "CacheEngine",
    "ConfigError",
    "EmbeddingVector",
    "LookupOutcome",
    "RateLimitError",
    "RetriableError",
    "SemanticElement",
    "SemanticKey",
    "SemcacheError",
    "ValidationError",
    "cal_score",
    "make_element",
    "token_count",
    "__version__",
]
