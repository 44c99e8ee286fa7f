"""Proxy tests: tag parsing, the four serve modes, context widening,
recalibration plumbing, persistence."""

from __future__ import annotations

import os

import pytest

from semcache.embedder import HashedBagEmbedder
from semcache.engine import CacheEngine
from semcache.errors import ConfigError, ValidationError
from semcache.judge import AnnotatedSample, ReferenceJudge
from semcache.model import CacheConfig, SemanticKey
from semcache.prefetch import MarkovModel, Prefetcher
from semcache.proxy import (ServeResult, StageCosts, ToolCall, ToolProxy,
                            parse_tool_calls)
from semcache.remote import (NOT_FOUND, CostLedger, RemoteToolClient,
                             SimulatedService, SlidingWindowRateLimiter,
                             ToolEndpointConfig)
from semcache.simkit import Simulation
from semcache.traces import build_clusters

EMBEDDER = HashedBagEmbedder(dimension=256, seed=1)


# ---- parsing ----

def test_parse_extracts_calls_in_document_order():
    text = ("<think>plan the steps</think><search>first query</search> then "
            "<lookup> second query </lookup> and <search>third</search>")
    result = parse_tool_calls(text, ["search", "lookup"])
    assert [(c.tool, c.query_text) for c in result.calls] == [
        ("search", "first query"), ("lookup", "second query"),
        ("search", "third")]
    assert result.diagnostics == ()
    start, end = result.calls[0].raw_span
    assert text[start:end] == "<search>first query</search>"


def test_parse_flags_unclosed_and_empty_tags():
    text = "<search>dangling <search>inner ok</search><lookup>  </lookup>"
    result = parse_tool_calls(text, ["search", "lookup"])
    assert [c.query_text for c in result.calls] == ["inner ok"]
    assert result.diagnostics == ("unclosed <search> at offset 0",
                                  "empty <lookup> at offset 42")


def test_parse_leaves_foreign_tags_alone():
    text = "<note>keep <b>this</b></note><search>q <b>bold</b> words</search>"
    result = parse_tool_calls(text, ["search"])
    assert [c.query_text for c in result.calls] == ["q <b>bold</b> words"]


def test_parse_validation():
    with pytest.raises(ConfigError):
        parse_tool_calls("anything", [])
    with pytest.raises(ValidationError):
        ToolCall("search", "   ", (0, 0))


def test_stage_costs():
    costs = StageCosts()
    assert costs.retrieval_s() == pytest.approx(0.02)
    assert costs.judge_s(0) == 0.0
    assert costs.judge_s(3) == pytest.approx(0.09)


def test_serve_result_invariants():
    from semcache.proxy import _BYPASS
    with pytest.raises(ValidationError):
        ServeResult(value="v", source="cache", outcome=_BYPASS)
    with pytest.raises(ValidationError):
        ServeResult(value="v", source="remote", outcome=_BYPASS, fetch=None)


# ---- serve modes ----

def make_stack(mode, table, aliases=None, *, prefetch=False, context_chars=0,
               latency_ms=100.0, max_retries=8, rate_limit=10_000):
    sim = Simulation()
    engine = CacheEngine(CacheConfig(capacity_tokens=100_000), EMBEDDER,
                         ReferenceJudge())
    cfg = ToolEndpointConfig("search", base_latency_ms=latency_ms,
                             rate_limit_per_min=rate_limit,
                             max_retries=max_retries)
    client = RemoteToolClient(
        cfg, SimulatedService(table, aliases, base_latency_ms=latency_ms),
        SlidingWindowRateLimiter(rate_limit), CostLedger(), clock=sim.clock())
    prefetcher = None
    if prefetch:
        prefetcher = Prefetcher(MarkovModel(), engine, {"search": client},
                                sim.clock(), sim.spawn)
    proxy = ToolProxy(engine, {"search": client}, mode=mode,
                      prefetcher=prefetcher, clock=sim.clock(),
                      context_chars=context_chars)
    return sim, proxy


def serve_all(sim, proxy, calls):
    """Run calls sequentially on the virtual clock; returns ServeResults."""
    results = []

    def job():
        for call, context in calls:
            results.append((yield from proxy.handle_steps(call, context)))

    sim.spawn(job())
    sim.run()
    return results


def cluster_fixture():
    specs = build_clusters(2, 3, seed=7, distractor_of={1: 0})
    table = {spec.gt_key: spec.answer for spec in specs}
    aliases = {p: spec.gt_key for spec in specs for p in spec.paraphrases}
    return specs, table, aliases


def test_vanilla_mode_never_touches_the_cache():
    specs, table, aliases = cluster_fixture()
    sim, proxy = make_stack("vanilla", table, aliases)
    call = ToolCall("search", specs[0].paraphrases[0], (0, 0))
    results = serve_all(sim, proxy, [(call, ""), (call, "")])
    assert [r.source for r in results] == ["remote", "remote"]
    assert len(proxy.engine) == 0
    assert proxy.stats.remote_fetches == 2 and proxy.stats.cache_hits == 0
    assert sim.now == pytest.approx(0.2)  # two bare fetches, no stage costs


def test_exact_mode_hits_only_literal_repeats():
    specs, table, aliases = cluster_fixture()
    sim, proxy = make_stack("exact", table, aliases)
    base = specs[0]
    results = serve_all(sim, proxy, [
        (ToolCall("search", base.paraphrases[0], (0, 0)), ""),
        (ToolCall("search", base.paraphrases[0], (0, 0)), ""),
        (ToolCall("search", base.paraphrases[1], (0, 0)), ""),
    ])
    assert [r.source for r in results] == ["remote", "cache", "remote"]
    assert results[1].stage_delay_s == 0.0
    assert results[1].value == base.answer


def test_ann_only_mode_accepts_the_distractor():
    specs, table, aliases = cluster_fixture()
    base, distractor = specs
    sim, proxy = make_stack("ann_only", table, aliases)
    results = serve_all(sim, proxy, [
        (ToolCall("search", base.paraphrases[0], (0, 0)), ""),
        (ToolCall("search", distractor.paraphrases[0], (0, 0)), ""),
    ])
    assert [r.source for r in results] == ["remote", "cache"]
    # vector-only lookup serves the wrong cluster's answer
    assert results[1].value == base.answer
    assert results[1].outcome.s_lsm is None
    assert results[1].stage_delay_s == pytest.approx(0.02)


def test_full_mode_validates_candidates():
    specs, table, aliases = cluster_fixture()
    base, distractor = specs
    sim, proxy = make_stack("full", table, aliases)
    results = serve_all(sim, proxy, [
        (ToolCall("search", base.paraphrases[0], (0, 0)), ""),
        (ToolCall("search", base.paraphrases[1], (0, 0)), ""),
        (ToolCall("search", distractor.paraphrases[0], (0, 0)), ""),
    ])
    assert [r.source for r in results] == ["remote", "cache", "remote"]
    hit = results[1]
    assert hit.value == base.answer
    assert hit.outcome.s_lsm == pytest.approx(1.0)
    assert hit.stage_delay_s == pytest.approx(0.05)  # retrieval + one judge call
    # the distractor cleared the vector stage, failed the judge, and was
    # answered correctly from the remote table
    rejected = results[2]
    assert rejected.outcome.judged == 1
    assert rejected.value == distractor.answer
    # only the hit lands in the recalibration log
    assert len(proxy.recent_log) == 1
    assert proxy.recent_log[0].cached_query == base.paraphrases[0]
    assert proxy.recent_log[0].s_lsm == pytest.approx(1.0)
    # timing: miss 0.02 + 0.1 fetch, hit 0.05, judged miss 0.05 + 0.1
    assert sim.now == pytest.approx(0.12 + 0.05 + 0.15)


def test_full_mode_counts_not_found():
    sim, proxy = make_stack("full", {})
    results = serve_all(sim, proxy, [
        (ToolCall("search", "nothing has this answer", (0, 0)), "")])
    assert results[0].source == "remote" and results[0].value == NOT_FOUND
    assert proxy.stats.not_found == 1
    assert len(proxy.engine) == 0  # not-found results are never admitted


def test_rate_limit_exhaustion_serves_an_error_result():
    specs, table, aliases = cluster_fixture()
    sim, proxy = make_stack("full", table, aliases, rate_limit=1, max_retries=0)
    base = specs[0]
    results = serve_all(sim, proxy, [
        (ToolCall("search", base.paraphrases[0], (0, 0)), ""),
        (ToolCall("search", specs[1].paraphrases[1], (0, 0)), ""),
    ])
    assert results[0].source == "remote"
    err = results[1]
    assert err.source == "error" and err.value == ""
    assert "retries" in err.error
    assert proxy.stats.errors == 1


def test_unknown_tool_raises():
    sim, proxy = make_stack("full", {})
    with pytest.raises(ConfigError):
        proxy.handle(ToolCall("imaginary", "q", (0, 0)))


def test_context_rescues_a_clipped_follow_up():
    cached_q = "what is the alpha beta gamma delta lambda"
    clipped_q = "what is the alpha beta gamma delta"
    answer = "alpha beta gamma delta lambda"
    table = {"k": answer, "clip": "bare answer"}
    aliases = {cached_q: "k", clipped_q: "clip"}

    # without context the clipped query fails the judge and goes remote
    sim, proxy = make_stack("full", table, aliases)
    results = serve_all(sim, proxy, [
        (ToolCall("search", cached_q, (0, 0)), ""),
        (ToolCall("search", clipped_q, (0, 0)), ""),
    ])
    assert [r.source for r in results] == ["remote", "remote"]
    assert results[1].outcome.judged == 1  # candidate found, judge said no

    # with conversation context appended to the judge text it hits
    sim, proxy = make_stack("full", table, aliases, context_chars=64)
    results = serve_all(sim, proxy, [
        (ToolCall("search", cached_q, (0, 0)), ""),
        (ToolCall("search", clipped_q, (0, 0)), "and for the lambda"),
    ])
    assert [r.source for r in results] == ["remote", "cache"]
    assert results[1].value == answer


def test_full_mode_feeds_the_prefetcher():
    specs, table, aliases = cluster_fixture()
    base, distractor = specs
    sim, proxy = make_stack("full", table, aliases, prefetch=True)
    a = ToolCall("search", base.paraphrases[0], (0, 0))
    b = ToolCall("search", distractor.paraphrases[0], (0, 0))
    serve_all(sim, proxy, [(a, ""), (a, ""), (b, ""), (a, ""), (a, "")])
    # hits: a#2 (after a#1 admitted), b was served remote then admitted,
    # a#3 hit, a#4 hit; chain a->a observed
    model = proxy.prefetcher.model
    assert model.total(base.paraphrases[0].lower()) >= 1
    assert proxy.stats.cache_hits >= 2


# ---- maintenance ----

def test_recalibrate_publishes_the_new_threshold():
    specs, table, aliases = cluster_fixture()
    base, distractor = specs
    sim, proxy = make_stack("full", table, aliases)
    serve_all(sim, proxy, [
        (ToolCall("search", base.paraphrases[0], (0, 0)), ""),
        (ToolCall("search", base.paraphrases[1], (0, 0)), ""),
        (ToolCall("search", distractor.paraphrases[0], (0, 0)), ""),
        (ToolCall("search", distractor.paraphrases[1], (0, 0)), ""),
    ])
    assert len(proxy.recent_log) == 2  # one confirmed hit per cluster
    validation = [
        AnnotatedSample("q1", "r1", 0.90, True),
        AnnotatedSample("q2", "r2", 0.92, False),
        AnnotatedSample("q3", "r3", 0.95, True),
        AnnotatedSample("q4", "r4", 0.97, True),
    ]
    result = proxy.recalibrate_now(validation, p_target=0.99)
    assert result.tau_lsm == 0.95 and result.feasible
    assert proxy.engine.config.tau_lsm == 0.95
    assert result.annotated == 2  # both logged hits got ground-truthed


def test_recalibrate_needs_a_tool_name_with_many_clients():
    specs, table, aliases = cluster_fixture()
    sim, proxy = make_stack("full", table, aliases)
    proxy.clients["second"] = proxy.clients["search"]
    with pytest.raises(ConfigError):
        proxy.recalibrate_now([AnnotatedSample("q", "r", 0.9, True)])


def test_save_writes_state_and_transition_model(tmp_path):
    specs, table, aliases = cluster_fixture()
    base = specs[0]
    sim, proxy = make_stack("full", table, aliases, prefetch=True)
    a = ToolCall("search", base.paraphrases[0], (0, 0))
    serve_all(sim, proxy, [(a, ""), (a, ""), (a, "")])
    path = os.path.join(tmp_path, "proxy.state")
    proxy.save(path)
    loaded = CacheEngine.load(path, proxy.engine.config, EMBEDDER,
                              ReferenceJudge())
    assert len(loaded) == len(proxy.engine)
    model = MarkovModel.load(path + ".markov")
    canon = base.paraphrases[0].lower()
    assert model.predict(canon) == [(canon, 1.0)]


def test_on_serve_hook_sees_every_completion():
    specs, table, aliases = cluster_fixture()
    seen = []
    sim, proxy = make_stack("full", table, aliases)
    proxy.on_serve = lambda call, result: seen.append((call.query_text,
                                                       result.source))
    a = ToolCall("search", specs[0].paraphrases[0], (0, 0))
    serve_all(sim, proxy, [(a, ""), (a, "")])
    assert seen == [(specs[0].paraphrases[0], "remote"),
                    (specs[0].paraphrases[0], "cache")]
