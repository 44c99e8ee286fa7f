"""Capacity-limited semantic cache engine.

Lookup runs the two-stage pipeline: vector candidates above tau_sim,
then judge validation above tau_lsm, first passing candidate in
descending similarity wins. Admission evicts residents until the new
element fits. The default eviction policy scores each element by
log-scaled frequency, cost, latency and staticity divided by size, so
cheap-to-refetch bulky entries go first; plain lru and lfu policies are
available for comparison runs.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, replace

from .errors import RetriableError, ValidationError
from .index import ExactCosineIndex, SmallWorldIndex, parse_snapshot_lines
from .model import (
    CacheConfig,
    EmbeddingVector,
    SemanticElement,
    SemanticKey,
    deserialize_element,
    serialize_element,
)

_STATE_MAGIC = "semantic-cache-state"


def cal_score(element: SemanticElement, now: float, log=math.log) -> float:
    """Eviction value of one element; higher is more worth keeping.

    Zero when the element is expired or has no size. The log base only
    rescales every score by the same constant, so any base yields the
    same eviction order.
    """
    if element.size_tokens == 0 or element.remaining_ttl(now) <= 0.0:
        return 0.0
    return (
        log(element.frequency + 1)
        * log(element.retrieval_cost_usd * 1000.0 + 1)
        * log(element.retrieval_latency_ms + 1)
        * log(element.staticity + 1)
        / element.size_tokens
    )


@dataclass(frozen=True)
class StageTimings:
    embed_ms: float = 0.0
    index_ms: float = 0.0
    judge_ms: float = 0.0


@dataclass(frozen=True)
class LookupOutcome:
    kind: str  # "hit" or "miss"
    element_id: int | None
    element: SemanticElement | None
    similarity: float | None
    s_lsm: float | None
    candidates_considered: int
    judged: int
    timings: StageTimings
    query_embedding: EmbeddingVector | None
    error: str | None = None

    @property
    def hit(self) -> bool:
        return self.kind == "hit"


@dataclass(frozen=True)
class AdmitOutcome:
    element_id: int
    evicted_ids: tuple[int, ...]
    replaced_id: int | None


@dataclass
class EngineStats:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    admissions: int = 0
    replacements: int = 0
    evictions: int = 0
    expirations: int = 0


class CacheEngine:
    """Shared cache state plus the lookup/admission/eviction operations.

    State mutation goes through one lock (single-writer discipline);
    embedding and judging run outside it so slow backends do not stall
    other workers. The vector index and the element table stay in
    bijection after every public operation.
    """

    def __init__(self, config: CacheConfig, embedder, judge, index=None):
        self.config = config
        self._embedder = embedder
        self._judge = judge
        seed = getattr(embedder, "seed", 1)
        self._index = index if index is not None else ExactCosineIndex(
            embedder.dimension, seed=seed)
        self._lock = threading.Lock()
        self._elements: dict[int, SemanticElement] = {}
        self._by_key: dict[tuple[str, str], int] = {}
        self._last_access: dict[int, float] = {}
        self._usage = 0
        self._next_id = 1
        self._stats = EngineStats()

    # -------- accessors --------

    @property
    def usage_tokens(self) -> int:
        return self._usage

    @property
    def embedder(self):
        return self._embedder

    @property
    def judge(self):
        return self._judge

    def __len__(self) -> int:
        return len(self._elements)

    def get(self, element_id: int) -> SemanticElement | None:
        with self._lock:
            return self._elements.get(element_id)

    def elements(self) -> dict[int, SemanticElement]:
        with self._lock:
            return dict(self._elements)

    def stats(self) -> dict:
        with self._lock:
            s = self._stats
            return {
                "lookups": s.lookups,
                "hits": s.hits,
                "misses": s.misses,
                "admissions": s.admissions,
                "replacements": s.replacements,
                "evictions": s.evictions,
                "expirations": s.expirations,
                "usage_tokens": self._usage,
                "element_count": len(self._elements),
            }

    # -------- lookup pipeline --------

    def lookup(self, key: SemanticKey, now: float,
               judge_text: str | None = None) -> LookupOutcome:
        """Two-stage lookup. A hit bumps frequency and refreshes value_score.

        judge_text optionally widens what the judge sees (query plus
        surrounding context) without touching the embedding key.
        """
        t0 = time.perf_counter()
        try:
            emb = self._embedder.embed(key.text)
        except RetriableError as exc:
            with self._lock:
                self._stats.lookups += 1
                self._stats.misses += 1
            return LookupOutcome("miss", None, None, None, None, 0, 0,
                                 StageTimings(), None, error=str(exc))
        t1 = time.perf_counter()
        cands = self._index.query(emb, k=self.config.candidate_k,
                                  min_similarity=self.config.tau_sim)
        t2 = time.perf_counter()
        judged = 0
        error = None
        hit_id = None
        hit_sim = None
        hit_score = None
        for cand in cands:
            with self._lock:
                el = self._elements.get(cand.id)
            if el is None or el.key.tool != key.tool:
                continue
            if el.is_expired(now):
                with self._lock:
                    if cand.id in self._elements and self._elements[cand.id].is_expired(now):
                        self._remove_locked(cand.id)
                        self._stats.expirations += 1
                continue
            judged += 1
            try:
                s = self._judge.score(judge_text or key.text, el.key.text, el.value)
            except RetriableError as exc:
                error = str(exc)
                continue
            if s >= self.config.tau_lsm:
                hit_id, hit_sim, hit_score = cand.id, cand.similarity, s
                break
        t3 = time.perf_counter()
        timings = StageTimings(embed_ms=(t1 - t0) * 1000.0,
                               index_ms=(t2 - t1) * 1000.0,
                               judge_ms=(t3 - t2) * 1000.0)
        with self._lock:
            self._stats.lookups += 1
            if hit_id is not None:
                el = self._elements.get(hit_id)
                if el is not None and not el.is_expired(now):
                    updated = replace(el, frequency=el.frequency + 1)
                    updated = replace(updated, value_score=cal_score(updated, now))
                    self._elements[hit_id] = updated
                    self._last_access[hit_id] = now
                    self._stats.hits += 1
                    return LookupOutcome("hit", hit_id, updated, hit_sim, hit_score,
                                         len(cands), judged, timings, emb)
            self._stats.misses += 1
        return LookupOutcome("miss", None, None, None, None, len(cands), judged,
                             timings, emb, error=error)

    def lookup_exact(self, key: SemanticKey, now: float) -> LookupOutcome:
        """Literal key-equality hit test (comparison baseline, no vector stage)."""
        with self._lock:
            self._stats.lookups += 1
            eid = self._by_key.get((key.text, key.tool))
            if eid is not None:
                el = self._elements[eid]
                if el.is_expired(now):
                    self._remove_locked(eid)
                    self._stats.expirations += 1
                else:
                    updated = replace(el, frequency=el.frequency + 1)
                    updated = replace(updated, value_score=cal_score(updated, now))
                    self._elements[eid] = updated
                    self._last_access[eid] = now
                    self._stats.hits += 1
                    return LookupOutcome("hit", eid, updated, None, None, 0, 0,
                                         StageTimings(), None)
            self._stats.misses += 1
        return LookupOutcome("miss", None, None, None, None, 0, 0,
                             StageTimings(), None)

    def lookup_ann_only(self, key: SemanticKey, now: float) -> LookupOutcome:
        """Vector stage alone decides (comparison baseline, judge skipped)."""
        t0 = time.perf_counter()
        emb = self._embedder.embed(key.text)
        t1 = time.perf_counter()
        cands = self._index.query(emb, k=self.config.candidate_k,
                                  min_similarity=self.config.tau_sim)
        t2 = time.perf_counter()
        timings = StageTimings(embed_ms=(t1 - t0) * 1000.0,
                               index_ms=(t2 - t1) * 1000.0)
        with self._lock:
            self._stats.lookups += 1
            for cand in cands:
                el = self._elements.get(cand.id)
                if el is None or el.key.tool != key.tool:
                    continue
                if el.is_expired(now):
                    self._remove_locked(cand.id)
                    self._stats.expirations += 1
                    continue
                updated = replace(el, frequency=el.frequency + 1)
                updated = replace(updated, value_score=cal_score(updated, now))
                self._elements[cand.id] = updated
                self._last_access[cand.id] = now
                self._stats.hits += 1
                return LookupOutcome("hit", cand.id, updated, cand.similarity, None,
                                     len(cands), 0, timings, emb)
            self._stats.misses += 1
        return LookupOutcome("miss", None, None, None, None, len(cands), 0,
                             timings, emb)

    def peek(self, key: SemanticKey, now: float) -> bool:
        """Would lookup hit right now? No counters, no purging, no frequency."""
        try:
            emb = self._embedder.embed(key.text)
        except RetriableError:
            return False
        cands = self._index.query(emb, k=self.config.candidate_k,
                                  min_similarity=self.config.tau_sim)
        for cand in cands:
            with self._lock:
                el = self._elements.get(cand.id)
            if el is None or el.key.tool != key.tool or el.is_expired(now):
                continue
            try:
                if self._judge.score(key.text, el.key.text, el.value) >= self.config.tau_lsm:
                    return True
            except RetriableError:
                continue
        return False

    # -------- admission and eviction --------

    def admit(self, element: SemanticElement, now: float | None = None) -> AdmitOutcome:
        """Insert an element, evicting residents first if it would not fit.

        The incoming element is not a candidate in its own admission
        pass (it typically arrives at frequency 0, which would make it
        the immediate victim and the cache useless). Re-admitting an
        existing key replaces the old element.
        """
        if now is None:
            now = element.created_at
        if element.size_tokens > self.config.capacity_tokens:
            raise ValidationError(
                f"element of {element.size_tokens} tokens exceeds capacity "
                f"{self.config.capacity_tokens}")
        with self._lock:
            replaced = self._by_key.get((element.key.text, element.key.tool))
            if replaced is not None:
                self._remove_locked(replaced)
                self._stats.replacements += 1
            self._purge_expired_locked(now)
            evicted = []
            if self._usage + element.size_tokens > self.config.capacity_tokens:
                for victim in self._victim_order_locked(now):
                    self._remove_locked(victim)
                    self._stats.evictions += 1
                    evicted.append(victim)
                    if self._usage + element.size_tokens <= self.config.capacity_tokens:
                        break
            eid = self._next_id
            self._next_id += 1
            self._index.insert(eid, element.embedding)
            self._elements[eid] = element
            self._by_key[(element.key.text, element.key.tool)] = eid
            self._last_access[eid] = now
            self._usage += element.size_tokens
            self._stats.admissions += 1
            return AdmitOutcome(eid, tuple(evicted), replaced)

    def remove_expired(self, now: float) -> int:
        with self._lock:
            return self._purge_expired_locked(now)

    def evict_until_fits(self, now: float) -> list[int]:
        """TTL purge first, then lowest-score-first until usage fits capacity.

        Returns every removed id in removal order (expired ones lead).
        """
        with self._lock:
            expired = [eid for eid, el in self._elements.items() if el.is_expired(now)]
            removed = sorted(expired)
            for eid in removed:
                self._remove_locked(eid)
                self._stats.expirations += 1
            if self._usage > self.config.capacity_tokens:
                for victim in self._victim_order_locked(now):
                    self._remove_locked(victim)
                    self._stats.evictions += 1
                    removed.append(victim)
                    if self._usage <= self.config.capacity_tokens:
                        break
            return removed

    def _purge_expired_locked(self, now: float) -> int:
        expired = [eid for eid, el in self._elements.items() if el.is_expired(now)]
        for eid in sorted(expired):
            self._remove_locked(eid)
            self._stats.expirations += 1
        return len(expired)

    def _victim_order_locked(self, now: float) -> list[int]:
        # Scores snapshot once per pass; frequency cannot change mid-pass
        # because eviction runs under the writer lock.
        policy = self.config.eviction_policy
        if policy == "lcfu":
            keyed = [(cal_score(el, now), el.created_at, eid)
                     for eid, el in self._elements.items()]
        elif policy == "lru":
            keyed = [(self._last_access[eid], el.created_at, eid)
                     for eid, el in self._elements.items()]
        else:  # lfu
            keyed = [(el.frequency, el.created_at, eid)
                     for eid, el in self._elements.items()]
        keyed.sort()
        return [eid for _, _, eid in keyed]

    def _remove_locked(self, eid: int) -> None:
        el = self._elements.pop(eid)
        self._by_key.pop((el.key.text, el.key.tool), None)
        self._last_access.pop(eid, None)
        self._usage -= el.size_tokens
        self._index.remove(eid)

    # -------- persistence --------

    def save(self, path: str) -> None:
        """Write elements plus the index snapshot to one state file."""
        with self._lock:
            lines = [_STATE_MAGIC,
                     f"next_id: {self._next_id}",
                     f"count: {len(self._elements)}"]
            for eid in sorted(self._elements):
                lines.append(f"id: {eid}")
                lines.extend(serialize_element(self._elements[eid]).split("\n"))
        lines.extend(self._index.snapshot_lines())
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str, config: CacheConfig, embedder, judge) -> "CacheEngine":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != _STATE_MAGIC:
            raise ValidationError("not a cache state file")
        next_id = int(lines[1].split(":", 1)[1])
        count = int(lines[2].split(":", 1)[1])
        pos = 3
        records: dict[int, SemanticElement] = {}
        for _ in range(count):
            if not lines[pos].startswith("id: "):
                raise ValidationError(f"expected element id at line {pos + 1}")
            eid = int(lines[pos].split(":", 1)[1])
            record = "\n".join(lines[pos + 1:pos + 13])
            records[eid] = deserialize_element(record)
            pos += 13
        index_lines = lines[pos:]
        if not index_lines:
            raise ValidationError("state file is missing the index snapshot")
        magic = index_lines[0]
        kinds = {ExactCosineIndex.SNAPSHOT_MAGIC: ExactCosineIndex,
                 SmallWorldIndex.SNAPSHOT_MAGIC: SmallWorldIndex}
        if magic not in kinds:
            raise ValidationError(f"unknown index snapshot kind {magic!r}")
        dimension, seed, entries = parse_snapshot_lines(index_lines, magic)
        if {eid for eid, _ in entries} != set(records):
            raise ValidationError("index snapshot ids do not match element records")
        index = kinds[magic](dimension, seed=seed)
        engine = cls(config, embedder, judge, index=index)
        for eid, vec in sorted(entries, key=lambda p: p[0]):
            el = records[eid]
            if tuple(float(v) for v in vec) != el.embedding.components:
                raise ValidationError(f"index vector for id {eid} differs from element record")
            index.insert(eid, vec)
            engine._elements[eid] = el
            engine._by_key[(el.key.text, el.key.tool)] = eid
            engine._last_access[eid] = el.created_at
            engine._usage += el.size_tokens
        engine._next_id = max([next_id] + [eid + 1 for eid in records])
        return engine
