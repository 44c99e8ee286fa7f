"""Remote client tests: limiter window math, backoff schedule, ledger
conservation, simulated service determinism."""

from __future__ import annotations

from random import Random

import pytest

from semcache.errors import ConfigError, RateLimitError, RetriableError
from semcache.model import SemanticKey
from semcache.remote import (NOT_FOUND, CostLedger, HttpTool, RemoteToolClient,
                             SimulatedService, SlidingWindowRateLimiter,
                             ToolEndpointConfig, read_table, write_table)
from semcache.simkit import Simulation


def test_endpoint_config_validation():
    ToolEndpointConfig("search")
    with pytest.raises(ConfigError):
        ToolEndpointConfig("search", rate_limit_per_min=0)
    with pytest.raises(ConfigError):
        ToolEndpointConfig("search", cost_per_call_usd=-0.1)
    with pytest.raises(ConfigError):
        ToolEndpointConfig("search", max_retries=-1)


def test_ledger_cost_is_derived_not_accumulated():
    ledger = CostLedger()
    cheap = ToolEndpointConfig("feed", cost_per_call_usd=0.0005)
    dear = ToolEndpointConfig("archive", cost_per_call_usd=0.02)
    rng = Random(31)
    n_cheap = rng.randrange(50, 200)
    n_dear = rng.randrange(50, 200)
    n_missing = rng.randrange(5, 20)
    for _ in range(n_cheap):
        ledger.record_call(cheap)
    for _ in range(n_dear):
        ledger.record_call(dear)
    for _ in range(n_missing):
        ledger.record_call(cheap, found=False)
    ledger.record_retry()
    ledger.record_throttle()
    totals = ledger.totals()
    assert totals.api_cost_usd == n_cheap * 0.0005 + n_dear * 0.02
    assert totals.call_count == n_cheap + n_dear
    assert totals.not_found_count == n_missing
    assert totals.retry_count == 1 and totals.throttle_events == 1


def test_sliding_window_prunes_old_grants():
    lim = SlidingWindowRateLimiter(2, window_s=10.0)
    assert lim.try_acquire(0.0)
    assert lim.try_acquire(1.0)
    assert not lim.try_acquire(9.9)
    assert lim.try_acquire(10.0)  # the grant at t=0 just left the window
    assert lim.window_usage(10.0) == 2
    assert lim.window_usage(11.0) == 1


def test_prefetch_headroom_and_user_priority():
    lim = SlidingWindowRateLimiter(10, window_s=60.0, prefetch_headroom=2)
    for t in range(7):
        assert lim.try_acquire(float(t))
    assert lim.try_acquire(7.0, priority="prefetch")  # 7 + 2 < 10
    assert not lim.try_acquire(7.5, priority="prefetch")  # 8 + 2 >= 10
    assert lim.try_acquire(8.0)  # users still have the headroom
    assert lim.try_acquire(8.5)
    assert not lim.try_acquire(9.0)


def test_waiting_user_blocks_prefetch_outright():
    lim = SlidingWindowRateLimiter(10, window_s=60.0, prefetch_headroom=1)
    lim.begin_wait("user")
    assert not lim.try_acquire(0.0, priority="prefetch")
    lim.end_wait("user")
    assert lim.try_acquire(0.0, priority="prefetch")


def test_backoff_follows_the_exponential_schedule():
    sim = Simulation()
    cfg = ToolEndpointConfig("search", base_latency_ms=0.0, rate_limit_per_min=1,
                             max_retries=8, backoff_base_ms=100.0)
    limiter = SlidingWindowRateLimiter(1, window_s=2.0)
    service = SimulatedService({"q": "a"}, base_latency_ms=0.0)
    client = RemoteToolClient(cfg, service, limiter, clock=sim.clock())
    records = []

    def job():
        records.append((yield from client.fetch_steps(SemanticKey("q", "search"))))
        records.append((yield from client.fetch_steps(SemanticKey("q", "search"))))

    sim.spawn(job())
    sim.run()
    first, second = records
    assert first.latency_ms == 0.0 and first.retries == 0 and not first.throttled
    # denied at 0; waits 0.1+0.2+0.4+0.8+1.6 until the old grant leaves
    assert second.retries == 5 and second.throttled
    assert second.latency_ms == pytest.approx(3100.0)
    assert sim.now == pytest.approx(3.1)
    totals = client.ledger.totals()
    assert totals.call_count == 2 and totals.retry_count == 5
    assert totals.throttle_events == 5
    assert totals.api_cost_usd == 2 * 0.005


def test_retry_budget_exhaustion_raises():
    sim = Simulation()
    cfg = ToolEndpointConfig("search", base_latency_ms=0.0, rate_limit_per_min=1,
                             max_retries=2)
    limiter = SlidingWindowRateLimiter(1, window_s=1e9)
    client = RemoteToolClient(cfg, SimulatedService({"q": "a"}, base_latency_ms=0.0),
                              limiter, clock=sim.clock())
    failures = []

    def job():
        yield from client.fetch_steps(SemanticKey("q", "search"))
        try:
            yield from client.fetch_steps(SemanticKey("q", "search"))
        except RateLimitError:
            failures.append(sim.now)

    sim.spawn(job())
    sim.run()
    assert failures == [pytest.approx(0.3)]  # 0.1 + 0.2, then give up
    totals = client.ledger.totals()
    assert totals.retry_count == 2 and totals.throttle_events == 3
    assert totals.call_count == 1


def test_not_found_fetch_costs_nothing():
    cfg = ToolEndpointConfig("search", base_latency_ms=0.0)
    client = RemoteToolClient(cfg, SimulatedService({}, base_latency_ms=0.0))
    record = client.fetch(SemanticKey("missing", "search"))
    assert record.result == NOT_FOUND and record.cost_usd == 0.0
    totals = client.ledger.totals()
    assert totals.call_count == 0 and totals.not_found_count == 1
    assert totals.api_cost_usd == 0.0


def test_blocking_fetch_returns_a_record():
    cfg = ToolEndpointConfig("search", base_latency_ms=5.0)
    client = RemoteToolClient(cfg, SimulatedService({"q": "answer"},
                                                    base_latency_ms=5.0))
    record = client.fetch(SemanticKey("q", "search"))
    assert record.result == "answer"
    assert record.latency_ms >= 5.0


def test_simulated_service_jitter_is_seeded():
    a = SimulatedService({"k": "v"}, base_latency_ms=300.0, latency_jitter_ms=50.0,
                         seed=9)
    b = SimulatedService({"k": "v"}, base_latency_ms=300.0, latency_jitter_ms=50.0,
                         seed=9)
    delays_a = [a.resolve(SemanticKey("k", "t"))[0] for _ in range(20)]
    delays_b = [b.resolve(SemanticKey("k", "t"))[0] for _ in range(20)]
    assert delays_a == delays_b
    assert all(0.25 <= d <= 0.35 for d in delays_a)
    assert len(set(delays_a)) > 1


def test_simulated_service_aliases_and_misses():
    svc = SimulatedService({"k1": "v1"}, aliases={"what is it": "k1"},
                           base_latency_ms=0.0)
    delay, result, found = svc.resolve(SemanticKey("what is it", "search"))
    assert (delay, result, found) == (0.0, "v1", True)
    _, result, found = svc.resolve(SemanticKey("unknown", "search"))
    assert result == NOT_FOUND and not found


def test_table_round_trip(tmp_path):
    path = str(tmp_path / "table.tsv")
    table = {"k1": "first value", "k2": "second value"}
    write_table(path, table)
    assert read_table(path) == table
    with pytest.raises(ConfigError):
        write_table(path, {"bad\tkey": "v"})
    with open(path, "w") as fh:
        fh.write("no tab here\n")
    with pytest.raises(ConfigError):
        read_table(path)


def test_http_tool_error_paths():
    tool = HttpTool("http://127.0.0.1:9/t?q={query}", timeout_s=0.5,
                    auth_env="SEMCACHE_TEST_TOKEN_UNSET")
    with pytest.raises(ConfigError):
        tool.resolve(SemanticKey("x", "search"))
    bare = HttpTool("http://127.0.0.1:9/t?q={query}", timeout_s=0.5)
    with pytest.raises(RetriableError):
        bare.resolve(SemanticKey("x", "search"))
