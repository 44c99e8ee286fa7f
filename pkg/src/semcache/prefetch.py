"""Markov next-query prediction and speculative prefetch.

Transitions are learned from consecutive confirmed hits only; misses
stay out of the stream. Predicted queries that are not already
semantically cached get fetched asynchronously at prefetch priority and
admitted at frequency zero, so an unused prefetch is the first thing
eviction reclaims.
"""

from __future__ import annotations

import logging
import threading

from .errors import SemcacheError, ValidationError
from .model import SemanticKey, make_element
from .remote import NOT_FOUND

log = logging.getLogger(__name__)


def canonical_query(text: str) -> str:
    """Markov state key: lowercased with whitespace runs collapsed."""
    return " ".join(text.split()).lower()


class MarkovModel:
    """First-order transition counts between canonical query keys."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: dict[str, dict[str, int]] = {}
        self._totals: dict[str, int] = {}

    def observe(self, prev_query: str, next_query: str) -> None:
        with self._lock:
            row = self._counts.setdefault(prev_query, {})
            row[next_query] = row.get(next_query, 0) + 1
            self._totals[prev_query] = self._totals.get(prev_query, 0) + 1

    def predict(self, query: str) -> list[tuple[str, float]]:
        """Successors sorted by descending probability, ties by key."""
        with self._lock:
            row = self._counts.get(query)
            if not row:
                return []
            total = self._totals[query]
            return sorted(((q, c / total) for q, c in row.items()),
                          key=lambda pair: (-pair[1], pair[0]))

    def total(self, query: str) -> int:
        with self._lock:
            return self._totals.get(query, 0)

    def dump(self, path: str) -> None:
        """Edge list: source<TAB>target<TAB>count, sorted for stable diffs."""
        with self._lock:
            rows = [(src, dst, c)
                    for src, row in self._counts.items()
                    for dst, c in row.items()]
        rows.sort()
        with open(path, "w", encoding="utf-8") as fh:
            for src, dst, c in rows:
                fh.write(f"{src}\t{dst}\t{c}\n")

    @classmethod
    def load(cls, path: str) -> "MarkovModel":
        model = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValidationError(f"{path}:{i}: expected source, target, count")
                src, dst, count = parts[0], parts[1], int(parts[2])
                if count < 1:
                    raise ValidationError(f"{path}:{i}: count must be >= 1")
                with model._lock:
                    row = model._counts.setdefault(src, {})
                    row[dst] = row.get(dst, 0) + count
                    model._totals[src] = model._totals.get(src, 0) + count
        return model


def maybe_prefetch(current_key: SemanticKey, model: MarkovModel, theta: float,
                   cache, fetcher, now: float, *, in_flight: set | None = None,
                   max_in_flight: int = 4) -> list[str]:
    """Kick off fetches for likely-next queries that are not cached yet.

    cache only needs a side-effect-free `peek(key, now)`; fetcher is
    called once per initiated query and must not block. Returns the
    canonical queries initiated.
    """
    if not (0.0 <= theta <= 1.0):
        raise ValidationError("theta must be in [0, 1]")
    source = canonical_query(current_key.text)
    initiated = []
    for target, prob in model.predict(source):
        if prob < theta:
            break
        if in_flight is not None:
            if len(in_flight) >= max_in_flight or target in in_flight:
                continue
        key = SemanticKey(target, current_key.tool)
        if cache.peek(key, now):
            continue
        if in_flight is not None:
            in_flight.add(target)
        fetcher(key)
        initiated.append(target)
    return initiated


class Prefetcher:
    """Wires the model to a cache engine and remote clients.

    note_serve() feeds the hit stream and fires the prediction check for
    every served query. Fetch jobs are delay-yielding generators; the
    host supplies `spawn` (simulator spawn or a thread dispatcher), so
    the same logic runs in virtual and real time. One attempt per
    trigger: a failed prefetch is logged and dropped.
    """

    def __init__(self, model: MarkovModel, engine, clients: dict, clock, spawn,
                 theta: float = 0.5, max_in_flight: int = 4):
        self._model = model
        self._engine = engine
        self._clients = clients
        self._clock = clock
        self._spawn = spawn
        self.theta = theta
        self.max_in_flight = max_in_flight
        self._lock = threading.Lock()
        self._last_hit: str | None = None
        self._in_flight: set[str] = set()
        self.initiated = 0
        self.admitted = 0
        self.failed = 0

    @property
    def model(self) -> MarkovModel:
        return self._model

    def note_serve(self, key: SemanticKey, hit: bool) -> list[str]:
        if hit:
            canon = canonical_query(key.text)
            with self._lock:
                if self._last_hit is not None:
                    self._model.observe(self._last_hit, canon)
                self._last_hit = canon
        return self.trigger(key)

    def trigger(self, key: SemanticKey) -> list[str]:
        client = self._clients.get(key.tool)
        if client is None:
            return []
        now = self._clock.now()
        started = maybe_prefetch(
            key, self._model, self.theta, self._engine,
            fetcher=lambda k: self._spawn(self._job(k, client)),
            now=now, in_flight=self._in_flight,
            max_in_flight=self.max_in_flight)
        self.initiated += len(started)
        return started

    def _job(self, key: SemanticKey, client):
        canon = canonical_query(key.text)
        try:
            record = yield from client.fetch_steps(key, priority="prefetch")
            if record.result == NOT_FOUND:
                self.failed += 1
                log.info("prefetch found nothing for %r", key.text)
                return
            judge = self._engine.judge
            embedder = self._engine.embedder
            element = make_element(
                key=key,
                value=record.result,
                embedding=embedder.embed(key.text),
                staticity=judge.staticity(key.text, record.result),
                retrieval_latency_ms=record.latency_ms,
                retrieval_cost_usd=record.cost_usd,
                now=self._clock.now(),
                ttl_seconds=self._engine.config.ttl_seconds,
                frequency=0,
            )
            self._engine.admit(element, now=self._clock.now())
            self.admitted += 1
        except SemcacheError as exc:
            self.failed += 1
            log.info("prefetch for %r dropped: %s", key.text, exc)
        finally:
            with self._lock:
                self._in_flight.discard(canon)
