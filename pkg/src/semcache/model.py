"""Core datatypes for the semantic cache.

Defines the cache key, the embedding vector wrapper, the cached element
record, engine configuration, and the flat text serialization used by
snapshots and fixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ValidationError

EVICTION_POLICIES = ("lcfu", "lru", "lfu")


def token_count(value: str) -> int:
    """Size of a result in whitespace-delimited tokens.

    Raises ValidationError when the value contains no tokens at all.
    """
    n = len(value.split())
    if n == 0:
        raise ValidationError("value must contain at least one token")
    return n


@dataclass(frozen=True)
class SemanticKey:
    """Identity of a cacheable call: the query text plus the tool it targets."""

    text: str
    tool: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError("key text must be non-empty")
        if not self.tool.strip():
            raise ValidationError("key tool must be non-empty")


@dataclass(frozen=True)
class EmbeddingVector:
    """Immutable fixed-dimension vector."""

    components: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.components) == 0:
            raise ValidationError("embedding must have at least one component")
        for c in self.components:
            if not math.isfinite(c):
                raise ValidationError("embedding components must be finite")

    @classmethod
    def from_iterable(cls, values) -> "EmbeddingVector":
        return cls(tuple(float(v) for v in values))

    @property
    def dimension(self) -> int:
        return len(self.components)

    def norm(self) -> float:
        return math.sqrt(sum(c * c for c in self.components))

    def dot(self, other: "EmbeddingVector") -> float:
        if other.dimension != self.dimension:
            raise ValidationError(
                f"dimension mismatch: {self.dimension} vs {other.dimension}"
            )
        return sum(a * b for a, b in zip(self.components, other.components))

    def is_normalized(self, tol: float = 1e-6) -> bool:
        return abs(self.norm() - 1.0) <= tol


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine undefined for zero vector")
    return a.dot(b) / (na * nb)


@dataclass(frozen=True)
class SemanticElement:
    """One cached tool result plus the metadata eviction scoring needs.

    frequency counts validated hits only, never raw candidate matches.
    size_tokens is the whitespace token count of value. Instances are
    immutable; the engine replaces them wholesale on update.
    """

    key: SemanticKey
    value: str
    embedding: EmbeddingVector
    staticity: int
    frequency: int
    retrieval_latency_ms: float
    retrieval_cost_usd: float
    size_tokens: int
    created_at: float
    expiration_time: float
    value_score: float | None = None

    def remaining_ttl(self, now: float) -> float:
        return self.expiration_time - now

    def is_expired(self, now: float) -> bool:
        return self.remaining_ttl(now) <= 0.0


def make_element(
    key: SemanticKey,
    value: str,
    embedding: EmbeddingVector,
    staticity: int,
    retrieval_latency_ms: float,
    retrieval_cost_usd: float,
    now: float,
    ttl_seconds: float,
    frequency: int = 0,
) -> SemanticElement:
    """Build a validated element; size is derived from the value text."""
    if not isinstance(staticity, int) or not (1 <= staticity <= 10):
        raise ValidationError(f"staticity must be an integer in [1, 10], got {staticity!r}")
    if not (math.isfinite(retrieval_latency_ms) and retrieval_latency_ms >= 0.0):
        raise ValidationError("retrieval latency must be finite and >= 0")
    if not (math.isfinite(retrieval_cost_usd) and retrieval_cost_usd >= 0.0):
        raise ValidationError("retrieval cost must be finite and >= 0")
    if ttl_seconds <= 0.0:
        raise ValidationError("ttl must be positive")
    if frequency < 0:
        raise ValidationError("frequency must be >= 0")
    if not embedding.is_normalized():
        raise ValidationError("element embeddings must be L2-normalized")
    size = token_count(value)
    return SemanticElement(
        key=key,
        value=value,
        embedding=embedding,
        staticity=staticity,
        frequency=frequency,
        retrieval_latency_ms=retrieval_latency_ms,
        retrieval_cost_usd=retrieval_cost_usd,
        size_tokens=size,
        created_at=now,
        expiration_time=now + ttl_seconds,
    )


@dataclass
class CacheConfig:
    """Tunable knobs for the cache engine and retrieval pipeline."""

    capacity_tokens: int
    tau_sim: float = 0.9
    tau_lsm: float = 0.9
    ttl_seconds: float = 3600.0
    candidate_k: int = 5
    prefetch_theta: float = 0.5
    p_target: float = 0.99
    eviction_policy: str = "lcfu"

    def __post_init__(self) -> None:
        if self.capacity_tokens <= 0:
            raise ValidationError("capacity_tokens must be positive")
        for name in ("tau_sim", "tau_lsm", "prefetch_theta", "p_target"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValidationError(f"{name} must be in (0, 1], got {v}")
        if self.ttl_seconds <= 0.0:
            raise ValidationError("ttl_seconds must be positive")
        if self.candidate_k < 1:
            raise ValidationError("candidate_k must be >= 1")
        if self.eviction_policy not in EVICTION_POLICIES:
            raise ValidationError(
                f"eviction_policy must be one of {EVICTION_POLICIES}, got {self.eviction_policy!r}"
            )


# -------- flat text records --------
#
# One field per line, in a fixed order. Text fields escape backslash,
# newline and tab so arbitrary result bodies survive the round trip.
# Embedding components use float hex digits to keep the bits identical.

_FIELD_ORDER = (
    "tool",
    "key_text",
    "value",
    "embedding",
    "staticity",
    "frequency",
    "retrieval_latency_ms",
    "retrieval_cost_usd",
    "size_tokens",
    "created_at",
    "expiration_time",
    "value_score",
)


def escape_text(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def unescape_text(s: str) -> str:
    out = []
    i = 0
    while i < len(s):
        c = s[i]
        if c == "\\":
            if i + 1 >= len(s):
                raise ValidationError("dangling escape in record field")
            nxt = s[i + 1]
            if nxt == "\\":
                out.append("\\")
            elif nxt == "n":
                out.append("\n")
            elif nxt == "t":
                out.append("\t")
            else:
                raise ValidationError(f"unknown escape sequence \\{nxt}")
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def serialize_element(element: SemanticElement) -> str:
    """Render one element as a fixed-order multi-line text record."""
    lines = [
        escape_text(element.key.tool),
        escape_text(element.key.text),
        escape_text(element.value),
        " ".join(c.hex() for c in element.embedding.components),
        str(element.staticity),
        str(element.frequency),
        repr(element.retrieval_latency_ms),
        repr(element.retrieval_cost_usd),
        str(element.size_tokens),
        repr(element.created_at),
        repr(element.expiration_time),
        "none" if element.value_score is None else repr(element.value_score),
    ]
    return "\n".join(lines)


def deserialize_element(record: str) -> SemanticElement:
    """Parse a record produced by serialize_element. Strict on field count."""
    lines = record.split("\n")
    if len(lines) != len(_FIELD_ORDER):
        raise ValidationError(
            f"expected {len(_FIELD_ORDER)} record lines, got {len(lines)}"
        )
    tool = unescape_text(lines[0])
    key_text = unescape_text(lines[1])
    value = unescape_text(lines[2])
    try:
        embedding = EmbeddingVector(tuple(float.fromhex(p) for p in lines[3].split(" ")))
        staticity = int(lines[4])
        frequency = int(lines[5])
        latency = float(lines[6])
        cost = float(lines[7])
        size = int(lines[8])
        created = float(lines[9])
        expires = float(lines[10])
        score = None if lines[11] == "none" else float(lines[11])
    except ValueError as exc:
        raise ValidationError(f"malformed record field: {exc}") from exc
    element = SemanticElement(
        key=SemanticKey(text=key_text, tool=tool),
        value=value,
        embedding=embedding,
        staticity=staticity,
        frequency=frequency,
        retrieval_latency_ms=latency,
        retrieval_cost_usd=cost,
        size_tokens=size,
        created_at=created,
        expiration_time=expires,
        value_score=score,
    )
    if element.size_tokens != token_count(element.value):
        raise ValidationError("size_tokens does not match the value token count")
    return element
