"""Core datatype tests: keys, vectors, elements, record round trips."""

from __future__ import annotations

import math
from random import Random

import pytest

from semcache.errors import ValidationError
from semcache.model import (
    CacheConfig,
    EmbeddingVector,
    SemanticKey,
    cosine_similarity,
    deserialize_element,
    escape_text,
    make_element,
    serialize_element,
    token_count,
    unescape_text,
)


def unit_vector(values) -> EmbeddingVector:
    norm = math.sqrt(sum(v * v for v in values))
    return EmbeddingVector(tuple(v / norm for v in values))


def test_token_count():
    assert token_count("one") == 1
    assert token_count("  spaced   out\twords \n here ") == 4
    with pytest.raises(ValidationError):
        token_count("   ")


def test_semantic_key_validation():
    key = SemanticKey(text="what is x", tool="search")
    assert key.text == "what is x"
    with pytest.raises(ValidationError):
        SemanticKey(text="  ", tool="search")
    with pytest.raises(ValidationError):
        SemanticKey(text="q", tool="")


def test_embedding_vector_basics():
    v = EmbeddingVector((3.0, 4.0))
    assert v.dimension == 2
    assert v.norm() == pytest.approx(5.0)
    assert not v.is_normalized()
    assert unit_vector([3.0, 4.0]).is_normalized()
    with pytest.raises(ValidationError):
        EmbeddingVector(())
    with pytest.raises(ValidationError):
        EmbeddingVector((1.0, float("nan")))
    with pytest.raises(ValidationError):
        EmbeddingVector((1.0,)).dot(EmbeddingVector((1.0, 0.0)))


def test_cosine_similarity_matches_manual_formula():
    rng = Random(4021)
    for _ in range(50):
        a = [rng.uniform(-1, 1) for _ in range(8)]
        b = [rng.uniform(-1, 1) for _ in range(8)]
        va, vb = EmbeddingVector(tuple(a)), EmbeddingVector(tuple(b))
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        expected = dot / (na * nb)
        assert cosine_similarity(va, vb) == pytest.approx(expected, abs=1e-12)
        assert cosine_similarity(va, vb) == pytest.approx(cosine_similarity(vb, va))
    with pytest.raises(ValidationError):
        cosine_similarity(EmbeddingVector((0.0, 0.0)), EmbeddingVector((1.0, 0.0)))


def test_make_element_validation():
    key = SemanticKey("q tokens", "search")
    emb = unit_vector([1.0, 2.0, 2.0])
    el = make_element(key, "answer text here", emb, staticity=7,
                      retrieval_latency_ms=120.0, retrieval_cost_usd=0.004,
                      now=50.0, ttl_seconds=10.0)
    assert el.size_tokens == 3
    assert el.frequency == 0
    assert el.created_at == 50.0
    assert el.expiration_time == 60.0
    assert el.remaining_ttl(55.0) == pytest.approx(5.0)
    assert not el.is_expired(59.9)
    assert el.is_expired(60.0)

    for bad_staticity in (0, 11, 3.5):
        with pytest.raises(ValidationError):
            make_element(key, "v", emb, bad_staticity, 1.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        make_element(key, "v", emb, 5, -1.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        make_element(key, "v", emb, 5, 1.0, -0.1, 0.0, 1.0)
    with pytest.raises(ValidationError):
        make_element(key, "v", emb, 5, 1.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        make_element(key, "v", emb, 5, 1.0, 0.0, 0.0, 1.0, frequency=-1)
    with pytest.raises(ValidationError):
        make_element(key, "v", EmbeddingVector((1.0, 1.0)), 5, 1.0, 0.0, 0.0, 1.0)


def test_escape_round_trip():
    cases = ["plain", "tab\there", "line\nbreak", "back\\slash",
             "\\n literal", "mix\t\n\\\\end", ""]
    for s in cases:
        escaped = escape_text(s)
        assert "\n" not in escaped and "\t" not in escaped
        assert unescape_text(escaped) == s
    with pytest.raises(ValidationError):
        unescape_text("dangling\\")
    with pytest.raises(ValidationError):
        unescape_text("bad\\x")


def test_element_record_round_trip():
    rng = Random(99)
    for i in range(25):
        dim = rng.randrange(2, 12)
        emb = unit_vector([rng.uniform(-1, 1) or 0.5 for _ in range(dim)])
        value = " ".join(rng.choice(["alpha", "beta", "gamma", "delta"])
                         for _ in range(rng.randrange(1, 9)))
        if i % 5 == 0:
            value += " trailing\ttab and\nnewline"
        el = make_element(
            SemanticKey(f"query {i} text", f"tool{i % 3}"), value, emb,
            staticity=rng.randrange(1, 11),
            retrieval_latency_ms=rng.uniform(0, 2000),
            retrieval_cost_usd=rng.uniform(0, 0.1),
            now=rng.uniform(0, 1e6), ttl_seconds=rng.uniform(1, 1e5),
            frequency=rng.randrange(0, 50))
        assert deserialize_element(serialize_element(el)) == el


def test_element_record_rejects_corruption():
    emb = unit_vector([1.0, 1.0])
    el = make_element(SemanticKey("q", "t"), "three word value", emb,
                      5, 10.0, 0.01, 0.0, 60.0)
    record = serialize_element(el)
    with pytest.raises(ValidationError):
        deserialize_element(record + "\nextra")
    lines = record.split("\n")
    lines[8] = "99"  # size_tokens no longer matches the value
    with pytest.raises(ValidationError):
        deserialize_element("\n".join(lines))
    lines = record.split("\n")
    lines[4] = "not-a-number"
    with pytest.raises(ValidationError):
        deserialize_element("\n".join(lines))


def test_cache_config_validation():
    cfg = CacheConfig(capacity_tokens=100)
    assert cfg.tau_sim == 0.9 and cfg.tau_lsm == 0.9
    assert cfg.eviction_policy == "lcfu"
    with pytest.raises(ValidationError):
        CacheConfig(capacity_tokens=0)
    with pytest.raises(ValidationError):
        CacheConfig(capacity_tokens=10, tau_sim=1.5)
    with pytest.raises(ValidationError):
        CacheConfig(capacity_tokens=10, tau_lsm=0.0)
    with pytest.raises(ValidationError):
        CacheConfig(capacity_tokens=10, ttl_seconds=0.0)
    with pytest.raises(ValidationError):
        CacheConfig(capacity_tokens=10, candidate_k=0)
    with pytest.raises(ValidationError):
        CacheConfig(capacity_tokens=10, eviction_policy="mru")
