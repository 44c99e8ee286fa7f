"""Remote tool access: rate limiting, retries, cost accounting.

The client executes fetches as delay-yielding generator processes so
the same code path runs under the virtual clock in simulations and
under real sleeps in live mode. A sliding-window limiter enforces the
per-minute quota and keeps prefetch traffic behind user traffic.
"""

from __future__ import annotations

import logging
import os
import threading
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from random import Random

from .errors import ConfigError, RateLimitError, RetriableError
from .model import SemanticKey
from .simkit import WallClock, drive_blocking

log = logging.getLogger(__name__)

NOT_FOUND = "__not_found__"


@dataclass
class ToolEndpointConfig:
    name: str
    base_latency_ms: float = 300.0
    latency_jitter_ms: float = 0.0
    cost_per_call_usd: float = 0.005
    rate_limit_per_min: int = 100
    max_retries: int = 8
    backoff_base_ms: float = 100.0

    def __post_init__(self) -> None:
        if self.rate_limit_per_min < 1:
            raise ConfigError("rate_limit_per_min must be >= 1")
        for name in ("base_latency_ms", "latency_jitter_ms", "cost_per_call_usd",
                     "backoff_base_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be non-negative")


@dataclass(frozen=True)
class FetchRecord:
    query: SemanticKey
    result: str
    latency_ms: float
    cost_usd: float
    retries: int
    throttled: bool


@dataclass(frozen=True)
class LedgerTotals:
    api_cost_usd: float
    call_count: int
    retry_count: int
    throttle_events: int
    not_found_count: int


class CostLedger:
    """Monotone shared counters for remote traffic.

    api_cost_usd is derived as sum(calls_per_endpoint * cost_per_call),
    never accumulated call by call, so the ledger conservation identity
    holds to the last bit. Calls that found no result carry no cost and
    are tallied separately.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._calls: dict[str, int] = {}
        self._costs: dict[str, float] = {}
        self._retries = 0
        self._throttles = 0
        self._not_found = 0

    def record_call(self, endpoint: ToolEndpointConfig, found: bool = True) -> None:
        with self._lock:
            if found:
                self._calls[endpoint.name] = self._calls.get(endpoint.name, 0) + 1
                self._costs[endpoint.name] = endpoint.cost_per_call_usd
            else:
                self._not_found += 1

    def record_retry(self) -> None:
        with self._lock:
            self._retries += 1

    def record_throttle(self) -> None:
        with self._lock:
            self._throttles += 1

    def totals(self) -> LedgerTotals:
        with self._lock:
            cost = sum(n * self._costs[name] for name, n in self._calls.items())
            return LedgerTotals(
                api_cost_usd=cost,
                call_count=sum(self._calls.values()),
                retry_count=self._retries,
                throttle_events=self._throttles,
                not_found_count=self._not_found,
            )


class SlidingWindowRateLimiter:
    """At most `limit` grants inside any sliding window of window_s seconds.

    Prefetch-priority requests only get a permit when no user request is
    waiting and a headroom of permits remains free for users who might
    arrive within the window.
    """

    def __init__(self, limit: int, window_s: float = 60.0, prefetch_headroom: int | None = None):
        if limit < 1:
            raise ConfigError("limit must be >= 1")
        self.limit = limit
        self.window_s = window_s
        self.prefetch_headroom = (max(1, limit // 10)
                                  if prefetch_headroom is None else prefetch_headroom)
        self._lock = threading.Lock()
        self._grants: list[float] = []
        self._waiting_user = 0
        self._waiting_prefetch = 0

    def _prune(self, now: float) -> None:
        cutoff = now - self.window_s
        i = 0
        while i < len(self._grants) and self._grants[i] <= cutoff:
            i += 1
        if i:
            del self._grants[:i]

    def try_acquire(self, now: float, priority: str = "user") -> bool:
        with self._lock:
            self._prune(now)
            used = len(self._grants)
            if priority == "prefetch":
                if self._waiting_user > 0:
                    return False
                if used + self.prefetch_headroom >= self.limit:
                    return False
            elif used >= self.limit:
                return False
            self._grants.append(now)
            return True

    def begin_wait(self, priority: str) -> None:
        with self._lock:
            if priority == "user":
                self._waiting_user += 1
            else:
                self._waiting_prefetch += 1

    def end_wait(self, priority: str) -> None:
        with self._lock:
            if priority == "user":
                self._waiting_user -= 1
            else:
                self._waiting_prefetch -= 1

    def window_usage(self, now: float) -> int:
        with self._lock:
            self._prune(now)
            return len(self._grants)


class SimulatedService:
    """Stand-in for the remote tool, loaded with a ground-truth table.

    Latency draws come from a private seeded generator so a given seed
    replays the same jitter sequence. Queries resolve through an alias
    map (query text -> ground-truth key) when one is supplied.
    """

    def __init__(self, table: dict[str, str], aliases: dict[str, str] | None = None,
                 base_latency_ms: float = 300.0, latency_jitter_ms: float = 0.0,
                 seed: int = 1):
        self._table = dict(table)
        self._aliases = dict(aliases) if aliases else {}
        self.base_latency_ms = base_latency_ms
        self.latency_jitter_ms = latency_jitter_ms
        self._rng = Random(seed)
        self._lock = threading.Lock()

    def resolve(self, key: SemanticKey) -> tuple[float, str, bool]:
        with self._lock:
            jitter = self._rng.uniform(-self.latency_jitter_ms, self.latency_jitter_ms) \
                if self.latency_jitter_ms > 0 else 0.0
        delay_s = max(0.0, self.base_latency_ms + jitter) / 1000.0
        gt_key = self._aliases.get(key.text, key.text)
        result = self._table.get(gt_key)
        if result is None:
            return delay_s, NOT_FOUND, False
        return delay_s, result, True


class HttpTool:
    """Live adapter: resolve queries against a real HTTP endpoint."""

    def __init__(self, url_template: str, timeout_s: float = 30.0,
                 auth_env: str | None = None):
        self.url_template = url_template
        self.timeout_s = timeout_s
        self.auth_env = auth_env

    def resolve(self, key: SemanticKey) -> tuple[float, str, bool]:
        url = self.url_template.format(query=urllib.parse.quote(key.text),
                                       tool=urllib.parse.quote(key.tool))
        req = urllib.request.Request(url)
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if not token:
                raise ConfigError(f"environment variable {self.auth_env} is not set")
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                if resp.status == 404:
                    return 0.0, NOT_FOUND, False
                return 0.0, resp.read().decode("utf-8"), True
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                return 0.0, NOT_FOUND, False
            raise RetriableError(f"tool endpoint failed: {exc}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise RetriableError(f"tool endpoint unreachable: {exc}") from exc


class RemoteToolClient:
    """Fetch pipeline for one endpoint: permit, backoff, call, account."""

    def __init__(self, config: ToolEndpointConfig, service, limiter=None,
                 ledger: CostLedger | None = None, clock=None):
        self.config = config
        self._service = service
        self._limiter = limiter if limiter is not None else SlidingWindowRateLimiter(
            config.rate_limit_per_min)
        self._ledger = ledger if ledger is not None else CostLedger()
        self._clock = clock if clock is not None else WallClock()

    @property
    def ledger(self) -> CostLedger:
        return self._ledger

    @property
    def limiter(self) -> SlidingWindowRateLimiter:
        return self._limiter

    def fetch_steps(self, key: SemanticKey, priority: str = "user"):
        """Generator process yielding wait delays; returns a FetchRecord.

        Throttled attempts back off exponentially (base * 2^attempt).
        Exhausting max_retries raises RateLimitError. The recorded
        latency is true elapsed time including queueing.
        """
        start = self._clock.now()
        attempt = 0
        retries = 0
        throttled = False
        waiting = False
        try:
            while not self._limiter.try_acquire(self._clock.now(), priority):
                throttled = True
                self._ledger.record_throttle()
                if attempt >= self.config.max_retries:
                    raise RateLimitError(
                        f"gave up on {key.text!r} after {retries} retries")
                if not waiting:
                    self._limiter.begin_wait(priority)
                    waiting = True
                delay = self.config.backoff_base_ms * (2 ** attempt) / 1000.0
                attempt += 1
                retries += 1
                self._ledger.record_retry()
                yield delay
        finally:
            if waiting:
                self._limiter.end_wait(priority)
        delay_s, result, found = self._service.resolve(key)
        if delay_s > 0:
            yield delay_s
        self._ledger.record_call(self.config, found=found)
        latency_ms = (self._clock.now() - start) * 1000.0
        cost = self.config.cost_per_call_usd if found else 0.0
        return FetchRecord(query=key, result=result, latency_ms=latency_ms,
                           cost_usd=cost, retries=retries, throttled=throttled)

    def fetch(self, key: SemanticKey, priority: str = "user") -> FetchRecord:
        """Blocking wrapper for live use."""
        return drive_blocking(self.fetch_steps(key, priority))


def read_table(path: str) -> dict[str, str]:
    """Ground-truth table file: one `key<TAB>result` record per line."""
    table: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ConfigError(f"{path}:{i}: expected key<TAB>result")
            key, result = line.split("\t", 1)
            table[key] = result
    return table


def write_table(path: str, table: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(table):
            result = table[key]
            if "\t" in key or "\n" in key or "\t" in result or "\n" in result:
                raise ConfigError("table keys/results must be single-line, tab-free")
            fh.write(f"{key}\t{result}\n")
