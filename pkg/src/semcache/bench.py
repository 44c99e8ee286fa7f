"""Workload replay and comparison metrics.

Replay drives N closed-loop request workers over a trace against one of
four proxy configurations (vanilla, exact, ann_only, full), on a
virtual clock by default so large runs finish in seconds. Per-request
latency is think time plus simulated pipeline charges plus remote fetch
time; the report aggregates hit rate, throughput, latency percentiles,
API-call and retry accounting, cost, and answer accuracy.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field, fields

from .embedder import HashedBagEmbedder
from .engine import CacheEngine
from .errors import ConfigError, ValidationError
from .judge import ReferenceJudge
from .model import CacheConfig
from .prefetch import MarkovModel, Prefetcher
from .proxy import MODES, StageCosts, ToolCall, ToolProxy
from .remote import (CostLedger, NOT_FOUND, RemoteToolClient,
                     SimulatedService, SlidingWindowRateLimiter,
                     ToolEndpointConfig, WallClock)
from .simkit import Simulation, VirtualClock, drive_blocking
from .traces import Trace, TraceEvent


@dataclass
class ReplayOptions:
    mode: str = "full"
    workers: int = 8
    think_time_s: float = 0.6
    clock: str = "virtual"  # virtual | real
    cache_ratio: float = 0.4
    capacity_tokens: int | None = None
    seed: int = 1
    prefetch: bool = True
    stage_costs: StageCosts = field(default_factory=StageCosts)
    tau_sim: float = 0.9
    tau_lsm: float = 0.9
    ttl_seconds: float = 3600.0
    candidate_k: int = 5
    eviction_policy: str = "lcfu"
    embed_dim: int = 256
    remote_latency_ms: float = 400.0
    remote_jitter_ms: float = 40.0
    cost_per_call_usd: float = 0.005
    rate_limit_per_min: int = 100
    max_retries: int = 8
    backoff_base_ms: float = 100.0
    endpoints: dict[str, ToolEndpointConfig] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clock not in ("virtual", "real"):
            raise ConfigError("clock must be 'virtual' or 'real'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.capacity_tokens is None and self.cache_ratio <= 0:
            raise ConfigError("cache_ratio must be positive")


@dataclass(frozen=True)
class MetricsReport:
    mode: str
    n_events: int
    hits: int
    misses: int
    errors: int
    not_found: int
    hit_rate: float
    throughput_rps: float
    latency_mean_s: float
    latency_p50_s: float
    latency_p99_s: float
    api_calls: int
    retry_count: int
    retry_ratio: float
    throttle_events: int
    api_cost_usd: float
    cost_per_event_usd: float
    accuracy: float
    makespan_s: float
    agent_s: float
    cache_retrieval_s: float
    judge_s: float
    remote_s: float
    prefetch_initiated: int = 0
    prefetch_admitted: int = 0


@dataclass(frozen=True)
class RequestRecord:
    event: TraceEvent
    value: str
    source: str
    start: float
    end: float
    think_s: float
    retrieval_s: float
    judge_s: float
    remote_s: float

    @property
    def latency_s(self) -> float:
        return self.end - self.start


@dataclass
class ReplayResult:
    report: MetricsReport
    records: list[RequestRecord]
    proxy: ToolProxy
    engine: CacheEngine
    ledger: CostLedger
    prefetcher: Prefetcher | None


def _percentile(sorted_vals: list[float], q: float) -> float:
    if not sorted_vals:
        return 0.0
    idx = max(0, min(len(sorted_vals) - 1,
                     int(-(-q * len(sorted_vals) // 1)) - 1))
    return sorted_vals[idx]


def build_endpoints(tools, options: ReplayOptions) -> dict[str, ToolEndpointConfig]:
    if options.endpoints is not None:
        missing = set(tools) - set(options.endpoints)
        if missing:
            raise ConfigError(f"no endpoint config for tools: {sorted(missing)}")
        return dict(options.endpoints)
    return {tool: ToolEndpointConfig(
        name=tool,
        base_latency_ms=options.remote_latency_ms,
        latency_jitter_ms=options.remote_jitter_ms,
        cost_per_call_usd=options.cost_per_call_usd,
        rate_limit_per_min=options.rate_limit_per_min,
        max_retries=options.max_retries,
        backoff_base_ms=options.backoff_base_ms,
    ) for tool in tools}


def _build_stack(trace: Trace, options: ReplayOptions, clock, spawn):
    tools = sorted({ev.tool for ev in trace.events})
    capacity = options.capacity_tokens
    if capacity is None:
        capacity = max(1, round(options.cache_ratio * trace.unique_result_tokens()))
    config = CacheConfig(
        capacity_tokens=capacity, tau_sim=options.tau_sim,
        tau_lsm=options.tau_lsm, ttl_seconds=options.ttl_seconds,
        candidate_k=options.candidate_k,
        eviction_policy=options.eviction_policy)
    embedder = HashedBagEmbedder(dimension=options.embed_dim, seed=options.seed)
    judge = ReferenceJudge()
    engine = CacheEngine(config, embedder, judge)
    ledger = CostLedger()
    clients = {}
    aliases = trace.aliases()
    for tool, ep in build_endpoints(tools, options).items():
        # one simulated backend per endpoint so per-tool latency applies
        service = SimulatedService(trace.table, aliases,
                                   base_latency_ms=ep.base_latency_ms,
                                   latency_jitter_ms=ep.latency_jitter_ms,
                                   seed=options.seed)
        limiter = SlidingWindowRateLimiter(ep.rate_limit_per_min)
        clients[tool] = RemoteToolClient(ep, service, limiter, ledger, clock=clock)
    prefetcher = None
    if options.mode == "full" and options.prefetch:
        prefetcher = Prefetcher(MarkovModel(), engine, clients, clock, spawn,
                                theta=config.prefetch_theta)
    proxy = ToolProxy(engine, clients, mode=options.mode, prefetcher=prefetcher,
                      stage_costs=options.stage_costs, clock=clock)
    return proxy, engine, ledger, prefetcher


def validate_trace(trace: Trace) -> None:
    """Every event must resolve to a canonical answer before replay starts."""
    aliases = trace.aliases()
    for ev in trace.events:
        if ev.ground_truth_key not in trace.table:
            raise ValidationError(
                f"event ground_truth_key {ev.ground_truth_key!r} missing from table")
        if aliases and aliases.get(ev.query_text, ev.ground_truth_key) != ev.ground_truth_key:
            raise ValidationError(
                f"query {ev.query_text!r} aliased to a different key")


def replay(trace: Trace, options: ReplayOptions | None = None) -> ReplayResult:
    options = options or ReplayOptions()
    validate_trace(trace)
    if options.clock == "virtual":
        return _replay_virtual(trace, options)
    return _replay_real(trace, options)


def _decompose(result, think_s: float, total_s: float, options: ReplayOptions):
    retrieval_s = 0.0
    judge_s = 0.0
    if options.mode in ("ann_only", "full") and result.outcome.kind != "bypass":
        retrieval_s = options.stage_costs.retrieval_s()
        judge_s = result.stage_delay_s - retrieval_s
    remote_s = max(0.0, total_s - think_s - retrieval_s - judge_s)
    return retrieval_s, judge_s, remote_s


def _replay_virtual(trace: Trace, options: ReplayOptions) -> ReplayResult:
    sim = Simulation()
    clock = VirtualClock(sim)
    proxy, engine, ledger, prefetcher = _build_stack(trace, options, clock, sim.spawn)
    records: list[RequestRecord] = []
    cursor = [0]

    def worker():
        while cursor[0] < len(trace.events):
            ev = trace.events[cursor[0]]
            cursor[0] += 1
            now = clock.now()
            if ev.arrival > now:
                yield ev.arrival - now
            start = clock.now()
            yield options.think_time_s
            result = yield from proxy.handle_steps(
                ToolCall(ev.tool, ev.query_text, (0, len(ev.query_text))))
            end = clock.now()
            retrieval_s, judge_s, remote_s = _decompose(
                result, options.think_time_s, end - start, options)
            records.append(RequestRecord(
                event=ev, value=result.value, source=result.source,
                start=start, end=end, think_s=options.think_time_s,
                retrieval_s=retrieval_s, judge_s=judge_s, remote_s=remote_s))

    for _ in range(min(options.workers, max(1, len(trace.events)))):
        sim.spawn(worker())
    sim.run()
    return _finish(trace, options, records, proxy, engine, ledger, prefetcher)


def _replay_real(trace: Trace, options: ReplayOptions) -> ReplayResult:
    clock = WallClock()
    threads: list[threading.Thread] = []

    def spawn(gen):
        t = threading.Thread(target=drive_blocking, args=(gen,), daemon=True)
        t.start()

    proxy, engine, ledger, prefetcher = _build_stack(trace, options, clock, spawn)
    records: list[RequestRecord] = []
    lock = threading.Lock()
    cursor = [0]
    epoch = clock.now()

    def worker():
        while True:
            with lock:
                if cursor[0] >= len(trace.events):
                    return
                ev = trace.events[cursor[0]]
                cursor[0] += 1
            now = clock.now() - epoch
            if ev.arrival > now:
                time.sleep(ev.arrival - now)
            start = clock.now() - epoch
            time.sleep(options.think_time_s)
            result = proxy.handle(
                ToolCall(ev.tool, ev.query_text, (0, len(ev.query_text))))
            end = clock.now() - epoch
            retrieval_s, judge_s, remote_s = _decompose(
                result, options.think_time_s, end - start, options)
            with lock:
                records.append(RequestRecord(
                    event=ev, value=result.value, source=result.source,
                    start=start, end=end, think_s=options.think_time_s,
                    retrieval_s=retrieval_s, judge_s=judge_s, remote_s=remote_s))

    for _ in range(min(options.workers, max(1, len(trace.events)))):
        t = threading.Thread(target=worker)
        t.start()
        threads.append(t)
    for t in threads:
        t.join()
    return _finish(trace, options, records, proxy, engine, ledger, prefetcher)


def _finish(trace, options, records, proxy, engine, ledger, prefetcher) -> ReplayResult:
    n = len(records)
    hits = sum(1 for r in records if r.source == "cache")
    misses = sum(1 for r in records if r.source == "remote")
    errors = sum(1 for r in records if r.source == "error")
    not_found = sum(1 for r in records if r.value == NOT_FOUND)
    served = hits + misses
    correct = sum(1 for r in records if r.source != "error"
                  and r.value == trace.table.get(r.event.ground_truth_key))
    lat = sorted(r.latency_s for r in records)
    totals = ledger.totals()
    api_calls = totals.call_count + totals.not_found_count
    makespan = max((r.end for r in records), default=0.0)
    report = MetricsReport(
        mode=options.mode,
        n_events=n,
        hits=hits,
        misses=misses,
        errors=errors,
        not_found=not_found,
        hit_rate=hits / (hits + misses) if hits + misses else 0.0,
        throughput_rps=n / makespan if makespan > 0 else 0.0,
        latency_mean_s=sum(lat) / n if n else 0.0,
        latency_p50_s=_percentile(lat, 0.50),
        latency_p99_s=_percentile(lat, 0.99),
        api_calls=api_calls,
        retry_count=totals.retry_count,
        retry_ratio=totals.retry_count / api_calls if api_calls else 0.0,
        throttle_events=totals.throttle_events,
        api_cost_usd=totals.api_cost_usd,
        cost_per_event_usd=totals.api_cost_usd / n if n else 0.0,
        accuracy=correct / served if served else 0.0,
        makespan_s=makespan,
        agent_s=sum(r.think_s for r in records) / n if n else 0.0,
        cache_retrieval_s=sum(r.retrieval_s for r in records) / n if n else 0.0,
        judge_s=sum(r.judge_s for r in records) / n if n else 0.0,
        remote_s=sum(r.remote_s for r in records) / n if n else 0.0,
        prefetch_initiated=prefetcher.initiated if prefetcher else 0,
        prefetch_admitted=prefetcher.admitted if prefetcher else 0,
    )
    return ReplayResult(report=report, records=records, proxy=proxy,
                        engine=engine, ledger=ledger, prefetcher=prefetcher)


def latency_breakdown(report: MetricsReport) -> dict[str, float]:
    """Per-stage mean seconds; stages sum to the mean latency."""
    return {
        "agent": report.agent_s,
        "cache_retrieval": report.cache_retrieval_s,
        "judge": report.judge_s,
        "remote": report.remote_s,
    }


# -------- report text format --------
#
# Key-value block, then a machine-readable two-column table.

def render_report(report: MetricsReport) -> str:
    lines = []
    for f in fields(MetricsReport):
        v = getattr(report, f.name)
        lines.append(f"{f.name}: {v!r}" if isinstance(v, float) else f"{f.name}: {v}")
    lines.append("")
    lines.append("# table")
    lines.append("metric\tvalue")
    for f in fields(MetricsReport):
        lines.append(f"{f.name}\t{getattr(report, f.name)}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricsReport:
    values: dict[str, str] = {}
    for line in text.splitlines():
        if line.startswith("#") or "\t" in line or not line.strip():
            continue
        name, _, raw = line.partition(":")
        values[name.strip()] = raw.strip()
    kwargs = {}
    for f in fields(MetricsReport):
        if f.name not in values:
            raise ValidationError(f"report missing field {f.name}")
        raw = values[f.name]
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return MetricsReport(**kwargs)


def write_report(path: str, report: MetricsReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_report(report))


def read_report(path: str) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_report(fh.read())


def comparison_table(reports: list[MetricsReport]) -> str:
    """Side-by-side TSV across runs, one metric per row."""
    header = "metric\t" + "\t".join(r.mode for r in reports)
    rows = [header]
    for f in fields(MetricsReport):
        if f.name == "mode":
            continue
        rows.append(f.name + "\t" + "\t".join(str(getattr(r, f.name)) for r in reports))
    return "\n".join(rows) + "\n"


# -------- service bundle files --------
#
# Replay from files needs the answer table plus the query->key aliases;
# both live in one typed TSV so a trace stays a two-file artifact.

def write_service_file(path: str, table: dict[str, str],
                       aliases: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(table):
            _check_single_line(key, table[key])
            fh.write(f"result\t{key}\t{table[key]}\n")
        for query in sorted(aliases):
            _check_single_line(query, aliases[query])
            fh.write(f"alias\t{query}\t{aliases[query]}\n")


def read_service_file(path: str) -> tuple[dict[str, str], dict[str, str]]:
    table: dict[str, str] = {}
    aliases: dict[str, str] = {}
    if not os.path.exists(path):
        raise ConfigError(f"cannot read service file {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in ("result", "alias"):
                raise ValidationError(f"{path}:{i}: expected result/alias record")
            if parts[0] == "result":
                table[parts[1]] = parts[2]
            else:
                aliases[parts[1]] = parts[2]
    return table, aliases


def _check_single_line(*vals: str) -> None:
    for v in vals:
        if "\t" in v or "\n" in v:
            raise ValidationError("service file fields must be single-line, tab-free")


def trace_from_files(trace_path: str, service_path: str) -> Trace:
    from .traces import read_trace
    events = read_trace(trace_path)
    table, aliases = read_service_file(service_path)
    return Trace(events=events, table=table, clusters=[], alias_map=aliases)
