"""Query embedding backends.

The reference backend hashes bag-of-words counts into a fixed number of
buckets, which keeps tests deterministic across processes and platforms.
A thin HTTP client covers deployments that delegate embedding to a
separate service speaking the key-value text protocol.
"""

from __future__ import annotations

import hashlib
import string
import urllib.error
import urllib.request
from typing import Protocol

from .errors import RetriableError, ValidationError
from .model import EmbeddingVector

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> EmbeddingVector: ...


class HashedBagEmbedder:
    """Deterministic keyed-hash bag-of-words embedder.

    Same (seed, dimension) gives bit-identical vectors in any process.
    Output is L2-normalized; queries with no tokens are rejected.
    """

    def __init__(self, dimension: int = 256, seed: int = 1):
        if dimension < 8:
            raise ValidationError("embedder dimension must be >= 8")
        self.dimension = dimension
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=False)

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), key=self._key, digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dimension

    def embed(self, text: str) -> EmbeddingVector:
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError("cannot embed text with no tokens")
        counts = [0.0] * self.dimension
        for tok in tokens:
            counts[self._bucket(tok)] += 1.0
        norm = sum(c * c for c in counts) ** 0.5
        return EmbeddingVector(tuple(c / norm for c in counts))


class HttpEmbedder:
    """Client for an external embedding service.

    POSTs ``text: <query>`` and expects an ``embedding:`` line of
    space-separated floats back. Transport failures raise RetriableError
    so callers can apply their own retry policy.
    """

    def __init__(self, url: str, dimension: int = 256, timeout_s: float = 10.0):
        if dimension < 8:
            raise ValidationError("embedder dimension must be >= 8")
        self.url = url
        self.dimension = dimension
        self.timeout_s = timeout_s

    def embed(self, text: str) -> EmbeddingVector:
        if not tokenize(text):
            raise ValidationError("cannot embed text with no tokens")
        body = f"text: {text.replace(chr(10), ' ')}\n".encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                payload = resp.read().decode("utf-8")
        except (urllib.error.URLError, OSError) as exc:
            raise RetriableError(f"embedding service unavailable: {exc}") from exc
        for line in payload.splitlines():
            if line.startswith("embedding:"):
                parts = line.split(":", 1)[1].split()
                vec = EmbeddingVector.from_iterable(float(p) for p in parts)
                if vec.dimension != self.dimension:
                    raise ValidationError(
                        f"service returned dimension {vec.dimension}, expected {self.dimension}"
                    )
                if not vec.is_normalized(tol=1e-5):
                    raise ValidationError("service returned a non-normalized embedding")
                return vec
        raise RetriableError("embedding service response missing 'embedding:' line")
