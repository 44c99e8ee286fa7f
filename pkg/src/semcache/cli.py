"""Command-line entry points.

Subcommands: gen-zipf / gen-trend / gen-repo write a trace file plus a
service file (answer table + query aliases); replay runs a trace
against one proxy configuration and emits the metrics report; report
renders saved reports side by side; coloc-sim runs the co-location
scheduler simulation; serve starts the HTTP service from an INI file.
"""

from __future__ import annotations

import argparse
import sys

from . import bench, colocsim, traces
from .errors import SemcacheError
from .proxy import StageCosts
from .service import CacheService, load_config


def _add_gen_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--trace", required=True, help="output trace file (TSV)")
    p.add_argument("--service", required=True,
                   help="output service file (answer table + aliases)")


def _write_bundle(trace: traces.Trace, trace_path: str, service_path: str) -> None:
    traces.write_trace(trace_path, trace.events)
    bench.write_service_file(service_path, trace.table, trace.aliases())
    print(f"wrote {len(trace.events)} events to {trace_path}")
    print(f"wrote {len(trace.table)} results, {len(trace.aliases())} aliases "
          f"to {service_path}")


def _parse_topics(text: str) -> list[tuple[float, float]]:
    topics = []
    for part in text.split(","):
        peak, _, intensity = part.partition(":")
        topics.append((float(peak), float(intensity)))
    return topics


def _parse_freqs(text: str):
    out = []
    for part in text.split(","):
        path, _, freq = part.rpartition(":")
        out.append((path, float(freq)))
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="semcache",
        description="semantic cache for agent tool calls: workload "
                    "generation, replay benchmarks, scheduler simulation, "
                    "and a live proxy service")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-zipf", help="skewed-popularity paraphrase trace")
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--paraphrases", type=int, default=20)
    p.add_argument("--events", type=int, default=1000)
    p.add_argument("--zipf-s", type=float, default=0.99)
    p.add_argument("--spacing", type=float, default=0.0,
                   help="seconds between event arrivals")
    p.add_argument("--tool", default="search")
    p.add_argument("--answer-tokens", type=int, default=60)
    _add_gen_common(p)

    p = sub.add_parser("gen-trend", help="bursty trending-topic trace")
    p.add_argument("--topics", default="60:200,300:150,420:120,540:100",
                   help="comma list of peak:intensity pairs")
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--width", type=float, default=None)
    p.add_argument("--lag", type=float, default=None,
                   help="follower topic lag seconds")
    p.add_argument("--follower-scale", type=float, default=0.5)
    p.add_argument("--paraphrases", type=int, default=12)
    _add_gen_common(p)

    p = sub.add_parser("gen-repo", help="agent coding-session file reads")
    p.add_argument("--tasks", type=int, default=200)
    p.add_argument("--freqs", default="",
                   help="comma list of path:freq (default: built-in table)")
    p.add_argument("--spacing", type=float, default=1.0)
    _add_gen_common(p)

    p = sub.add_parser("replay", help="replay a trace against one configuration")
    p.add_argument("--trace", required=True)
    p.add_argument("--service", required=True)
    p.add_argument("--mode", default="full",
                   choices=("vanilla", "exact", "ann_only", "full"))
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--think-ms", type=float, default=600.0)
    p.add_argument("--clock", default="virtual", choices=("virtual", "real"))
    p.add_argument("--cache-ratio", type=float, default=0.4)
    p.add_argument("--capacity", type=int, default=None,
                   help="capacity in tokens (overrides --cache-ratio)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--tau-sim", type=float, default=0.9)
    p.add_argument("--tau-lsm", type=float, default=0.9)
    p.add_argument("--ttl", type=float, default=3600.0)
    p.add_argument("--policy", default="lcfu", choices=("lcfu", "lru", "lfu"))
    p.add_argument("--no-prefetch", action="store_true")
    p.add_argument("--remote-ms", type=float, default=400.0)
    p.add_argument("--jitter-ms", type=float, default=40.0)
    p.add_argument("--cost", type=float, default=0.005)
    p.add_argument("--rate-limit", type=int, default=100)
    p.add_argument("--max-retries", type=int, default=8)
    p.add_argument("--embed-ms", type=float, default=10.0)
    p.add_argument("--index-ms", type=float, default=10.0)
    p.add_argument("--judge-ms", type=float, default=30.0)
    p.add_argument("--out", default="", help="write the report here too")

    p = sub.add_parser("report", help="render saved reports side by side")
    p.add_argument("paths", nargs="+")

    p = sub.add_parser("coloc-sim", help="priority-aware co-location simulation")
    p.add_argument("--tasks", default="", help="task file (kind arrival service memory)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-agent", type=int, default=400)
    p.add_argument("--n-judge", type=int, default=1200)
    p.add_argument("--agent-share", type=float, default=0.8)
    p.add_argument("--static-agent", type=float, default=24.0)
    p.add_argument("--static-judge", type=float, default=4.0)
    p.add_argument("--dynamic-pool", type=float, default=16.0)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--baseline", action="store_true",
                   help="also run the dedicated-resource agent baseline")

    p = sub.add_parser("serve", help="start the HTTP proxy service")
    p.add_argument("--config", required=True, help="INI config file")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except SemcacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gen-zipf":
        tr = traces.gen_zipf_trace(args.clusters, args.paraphrases, args.events,
                                   args.zipf_s, args.seed, tool=args.tool,
                                   answer_tokens=args.answer_tokens,
                                   spacing_s=args.spacing)
        _write_bundle(tr, args.trace, args.service)
    elif args.command == "gen-trend":
        tr = traces.gen_trend_trace(_parse_topics(args.topics), args.duration,
                                    args.seed,
                                    paraphrases_per_cluster=args.paraphrases,
                                    width_s=args.width, follower_lag_s=args.lag,
                                    follower_scale=args.follower_scale)
        _write_bundle(tr, args.trace, args.service)
    elif args.command == "gen-repo":
        freqs = _parse_freqs(args.freqs) if args.freqs else traces.DEFAULT_REPO_FILES
        tr = traces.gen_repo_trace(freqs, args.tasks, args.seed,
                                   task_spacing_s=args.spacing)
        _write_bundle(tr, args.trace, args.service)
    elif args.command == "replay":
        tr = bench.trace_from_files(args.trace, args.service)
        options = bench.ReplayOptions(
            mode=args.mode, workers=args.workers,
            think_time_s=args.think_ms / 1000.0, clock=args.clock,
            cache_ratio=args.cache_ratio, capacity_tokens=args.capacity,
            seed=args.seed, prefetch=not args.no_prefetch,
            stage_costs=StageCosts(embed_ms=args.embed_ms,
                                   index_ms=args.index_ms,
                                   judge_ms=args.judge_ms),
            tau_sim=args.tau_sim, tau_lsm=args.tau_lsm,
            ttl_seconds=args.ttl, eviction_policy=args.policy,
            remote_latency_ms=args.remote_ms, remote_jitter_ms=args.jitter_ms,
            cost_per_call_usd=args.cost, rate_limit_per_min=args.rate_limit,
            max_retries=args.max_retries)
        result = bench.replay(tr, options)
        text = bench.render_report(result.report)
        print(text, end="")
        if args.out:
            bench.write_report(args.out, result.report)
    elif args.command == "report":
        reports = [bench.read_report(p) for p in args.paths]
        if len(reports) == 1:
            print(bench.render_report(reports[0]), end="")
        else:
            print(bench.comparison_table(reports), end="")
    elif args.command == "coloc-sim":
        config = colocsim.SchedulerConfig(
            agent_compute_share=args.agent_share,
            judge_compute_share=1.0 - args.agent_share,
            static_memory_agent=args.static_agent,
            static_memory_judge=args.static_judge,
            dynamic_pool=args.dynamic_pool,
            judge_batch_size=args.batch)
        if args.tasks:
            tasks = colocsim.read_tasks(args.tasks)
        else:
            tasks = colocsim.gen_mixed_load(args.seed, args.n_agent, args.n_judge)
        result = colocsim.run_sim(tasks, config)
        baseline = colocsim.dedicated_baseline(tasks, config) if args.baseline else None
        print(colocsim.render_coloc_report(result, baseline), end="")
    elif args.command == "serve":
        service = CacheService(load_config(args.config))
        host, port = service.address
        print(f"serving on http://{host}:{port} (mode {service.proxy.mode})",
              flush=True)
        try:
            service.serve_forever()
        except KeyboardInterrupt:
            service.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
