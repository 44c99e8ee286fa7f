"""Tool-call proxy: tag parsing plus the cache-aside serve path.

The proxy sits between an agent's emitted tool tags and the remote
endpoints. Each request runs lookup, falls back to a rate-limited
remote fetch on a miss, admits the fresh pair, and feeds confirmed hits
to the prefetcher's transition model. Serve paths are generators
yielding simulated delays so the same code drives both the virtual
clock benchmark and a live blocking service.
"""

from __future__ import annotations

import logging
import re
import threading
from collections import deque
from dataclasses import dataclass, field

from .engine import CacheEngine, LookupOutcome, StageTimings
from .errors import ConfigError, SemcacheError, ValidationError
from .judge import LogEntry, RecalibrationResult, evaluate_equal, recalibrate
from .model import SemanticKey, make_element
from .remote import NOT_FOUND, FetchRecord, RemoteToolClient, WallClock
from .simkit import drive_blocking

log = logging.getLogger(__name__)

MODES = ("vanilla", "exact", "ann_only", "full")


@dataclass(frozen=True)
class ToolCall:
    tool: str
    query_text: str
    raw_span: tuple[int, int]

    def __post_init__(self):
        if not self.query_text.strip():
            raise ValidationError("tool call query_text must be non-empty")


@dataclass(frozen=True)
class ParseResult:
    calls: tuple[ToolCall, ...]
    diagnostics: tuple[str, ...]


def parse_tool_calls(agent_output: str, tools) -> ParseResult:
    """Extract well-formed <tool>...</tool> pairs for the configured
    tool names, in document order. Malformed or empty tags are skipped
    and reported; tags outside the vocabulary (think, info, ...) are
    left alone.
    """
    names = list(tools)
    if not names:
        raise ConfigError("tool vocabulary must not be empty")
    open_re = re.compile("|".join(f"<({re.escape(n)})>" for n in names))
    calls: list[ToolCall] = []
    diags: list[str] = []
    pos = 0
    while True:
        m = open_re.search(agent_output, pos)
        if m is None:
            break
        name = m.group(0)[1:-1]
        close_tag = f"</{name}>"
        close_at = agent_output.find(close_tag, m.end())
        next_open = open_re.search(agent_output, m.end())
        if close_at < 0 or (next_open is not None and next_open.start() < close_at):
            diags.append(f"unclosed <{name}> at offset {m.start()}")
            pos = m.end()
            continue
        content = agent_output[m.end():close_at].strip()
        span = (m.start(), close_at + len(close_tag))
        if not content:
            diags.append(f"empty <{name}> at offset {m.start()}")
        else:
            calls.append(ToolCall(tool=name, query_text=content, raw_span=span))
        pos = close_at + len(close_tag)
    return ParseResult(calls=tuple(calls), diagnostics=tuple(diags))


@dataclass(frozen=True)
class StageCosts:
    """Simulated per-request pipeline charges, in milliseconds.

    judge_ms is charged once per candidate the judge actually scored.
    Defaults put cache retrieval at 20 ms and one validation at 30 ms.
    """
    embed_ms: float = 10.0
    index_ms: float = 10.0
    judge_ms: float = 30.0

    def retrieval_s(self) -> float:
        return (self.embed_ms + self.index_ms) / 1000.0

    def judge_s(self, judged: int) -> float:
        return self.judge_ms * judged / 1000.0


@dataclass(frozen=True)
class ServeResult:
    value: str
    source: str  # cache | remote | error
    outcome: LookupOutcome
    fetch: FetchRecord | None = None
    stage_delay_s: float = 0.0
    error: str | None = None

    def __post_init__(self):
        if self.source == "cache" and self.outcome.kind != "hit":
            raise ValidationError("cache-sourced result requires a hit outcome")
        if self.source == "remote" and self.fetch is None:
            raise ValidationError("remote-sourced result requires a fetch record")


_BYPASS = LookupOutcome("bypass", None, None, None, None, 0, 0,
                        StageTimings(), None)


@dataclass
class ProxyStats:
    served: int = 0
    cache_hits: int = 0
    remote_fetches: int = 0
    errors: int = 0
    not_found: int = 0


class ToolProxy:
    """Cache-aside front end over one engine and per-tool remote clients.

    mode selects the hit test: vanilla bypasses the cache, exact uses
    literal key equality, ann_only stops after the vector stage, full
    runs the judge-validated pipeline (and feeds the prefetcher and the
    recalibration log).
    """

    def __init__(self, engine: CacheEngine, clients: dict[str, RemoteToolClient], *,
                 mode: str = "full", prefetcher=None,
                 stage_costs: StageCosts | None = None, clock=None,
                 recent_log_cap: int = 1000, context_chars: int = 0,
                 on_serve=None):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        if context_chars < 0:
            raise ConfigError("context_chars must be >= 0")
        self.engine = engine
        self.clients = dict(clients)
        self.mode = mode
        self.prefetcher = prefetcher
        self.stage_costs = stage_costs or StageCosts()
        self.clock = clock or WallClock()
        self.context_chars = context_chars
        self.on_serve = on_serve
        self.stats = ProxyStats()
        self.recent_log: deque[LogEntry] = deque(maxlen=recent_log_cap)
        self._lock = threading.Lock()

    # ---- serve path ----

    def handle_steps(self, call: ToolCall, context: str = ""):
        """Generator serve path; yields simulated delays in seconds and
        returns a ServeResult. Every completion emits one metrics event.
        """
        result = yield from self._serve_steps(call, context)
        with self._lock:
            self.stats.served += 1
            if result.source == "cache":
                self.stats.cache_hits += 1
            elif result.source == "remote":
                self.stats.remote_fetches += 1
                if result.value == NOT_FOUND:
                    self.stats.not_found += 1
            else:
                self.stats.errors += 1
        if self.on_serve is not None:
            self.on_serve(call, result)
        return result

    def handle(self, call: ToolCall, context: str = "") -> ServeResult:
        """Blocking wrapper for live (wall clock) use."""
        return drive_blocking(self.handle_steps(call, context))

    def _serve_steps(self, call: ToolCall, context: str):
        client = self.clients.get(call.tool)
        if client is None:
            raise ConfigError(f"no remote client configured for tool {call.tool!r}")
        key = SemanticKey(text=call.query_text, tool=call.tool)
        now = self.clock.now()

        if self.mode == "vanilla":
            return (yield from self._fetch_and_wrap(client, key, _BYPASS, 0.0, admit=False))

        judge_text = None
        if self.context_chars > 0 and context:
            judge_text = f"{context[-self.context_chars:]} {call.query_text}"

        if self.mode == "exact":
            outcome = self.engine.lookup_exact(key, now)
            stage_s = 0.0
        elif self.mode == "ann_only":
            outcome = self.engine.lookup_ann_only(key, now)
            stage_s = self.stage_costs.retrieval_s()
        else:
            outcome = self.engine.lookup(key, now, judge_text=judge_text)
            stage_s = self.stage_costs.retrieval_s() + \
                self.stage_costs.judge_s(outcome.judged)
        if stage_s > 0:
            yield stage_s

        if outcome.hit:
            el = outcome.element
            if self.mode == "full":
                with self._lock:
                    self.recent_log.append(LogEntry(
                        query=call.query_text, served_result=el.value,
                        cached_query=el.key.text, s_lsm=outcome.s_lsm))
                self._note(key, hit=True)
            return ServeResult(value=el.value, source="cache", outcome=outcome,
                               stage_delay_s=stage_s)

        return (yield from self._fetch_and_wrap(
            client, key, outcome, stage_s, admit=True))

    def _fetch_and_wrap(self, client, key, outcome, stage_s, admit: bool):
        try:
            record = yield from client.fetch_steps(key, priority="user")
        except SemcacheError as exc:
            log.info("remote fetch failed for %r: %s", key.text, exc)
            if self.mode == "full":
                self._note(key, hit=False)
            return ServeResult(value="", source="error", outcome=outcome,
                               stage_delay_s=stage_s, error=str(exc))
        if admit and record.result != NOT_FOUND:
            self._admit_fetched(key, record, outcome)
        if self.mode == "full":
            self._note(key, hit=False)
        return ServeResult(value=record.result, source="remote", outcome=outcome,
                           fetch=record, stage_delay_s=stage_s)

    def _admit_fetched(self, key: SemanticKey, record: FetchRecord,
                       outcome: LookupOutcome) -> None:
        emb = outcome.query_embedding
        try:
            if emb is None:
                emb = self.engine.embedder.embed(key.text)
            staticity = self.engine.judge.staticity(key.text, record.result)
            element = make_element(
                key=key, value=record.result, embedding=emb,
                staticity=staticity,
                retrieval_latency_ms=record.latency_ms,
                retrieval_cost_usd=record.cost_usd,
                now=self.clock.now(),
                ttl_seconds=self.engine.config.ttl_seconds,
                frequency=1)
            self.engine.admit(element)
        except SemcacheError as exc:
            log.warning("admit skipped for %r: %s", key.text, exc)

    def _note(self, key: SemanticKey, hit: bool) -> None:
        if self.prefetcher is not None:
            self.prefetcher.note_serve(key, hit=hit)

    # ---- maintenance ----

    def recalibrate_now(self, validation_set, *, tool: str | None = None,
                        fetch_gt=None, evaluate_gt=evaluate_equal,
                        p_target: float | None = None,
                        sample_budget: int = 5) -> RecalibrationResult:
        """Run threshold recalibration over the recent hit log and
        publish the new tau_lsm to the engine config."""
        if fetch_gt is None:
            if tool is None:
                if len(self.clients) != 1:
                    raise ConfigError("tool must be named when several clients exist")
                tool = next(iter(self.clients))
            client = self.clients[tool]

            def fetch_gt(query: str) -> str:
                rec = client.fetch(SemanticKey(text=query, tool=tool))
                if rec.result == NOT_FOUND:
                    raise SemcacheError(f"no ground truth for {query!r}")
                return rec.result

        with self._lock:
            entries = list(self.recent_log)
        result = recalibrate(
            self.engine.judge, entries, validation_set,
            p_target if p_target is not None else self.engine.config.p_target,
            fetch_gt=fetch_gt, evaluate_gt=evaluate_gt,
            embedder=self.engine.embedder, sample_budget=sample_budget)
        self.engine.config.tau_lsm = result.tau_lsm
        return result

    def save(self, path: str) -> None:
        """Persist engine state; the transition model goes beside it."""
        self.engine.save(path)
        if self.prefetcher is not None:
            self.prefetcher.model.dump(path + ".markov")
