"""HTTP front end for the cache proxy.

Runs the serve path behind a threaded HTTP server with a key-value text
protocol: request bodies and responses are `name: value` lines with
backslash-escaped text fields. Configuration comes from an INI file:
service address and mode, cache knobs, the tool vocabulary, and one
section per tool endpoint (simulated table backend or a live URL
template). Shutdown stops accepting connections and drains in-flight
requests before returning.
"""

from __future__ import annotations

import configparser
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .bench import read_service_file
from .embedder import HashedBagEmbedder
from .engine import CacheEngine
from .errors import ConfigError, SemcacheError
from .judge import ReferenceJudge, read_validation
from .model import CacheConfig, escape_text, unescape_text
from .prefetch import MarkovModel, Prefetcher
from .proxy import MODES, StageCosts, ToolCall, ToolProxy
from .remote import (CostLedger, HttpTool, RemoteToolClient, SimulatedService,
                     SlidingWindowRateLimiter, ToolEndpointConfig, WallClock)
from .simkit import drive_blocking


@dataclass
class ToolBackend:
    endpoint: ToolEndpointConfig
    url_template: str = ""
    auth_env: str = ""


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8123
    mode: str = "full"
    context_chars: int = 0
    table_path: str = ""
    validation_path: str = ""
    state_path: str = "cache.state"
    prefetch: bool = True
    cache: CacheConfig = field(default_factory=lambda: CacheConfig(capacity_tokens=4096))
    embed_dim: int = 256
    seed: int = 1
    tools: dict[str, ToolBackend] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tools:
            raise ConfigError("at least one tool must be configured")


def load_config(path: str) -> ServiceConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    svc = parser["service"] if parser.has_section("service") else {}
    cache_sec = parser["cache"] if parser.has_section("cache") else {}
    cache = CacheConfig(
        capacity_tokens=int(cache_sec.get("capacity_tokens", 4096)),
        tau_sim=float(cache_sec.get("tau_sim", 0.9)),
        tau_lsm=float(cache_sec.get("tau_lsm", 0.9)),
        ttl_seconds=float(cache_sec.get("ttl_seconds", 3600.0)),
        candidate_k=int(cache_sec.get("candidate_k", 5)),
        prefetch_theta=float(cache_sec.get("prefetch_theta", 0.5)),
        p_target=float(cache_sec.get("p_target", 0.99)),
        eviction_policy=cache_sec.get("eviction_policy", "lcfu"),
    )
    if not parser.has_section("tools"):
        raise ConfigError("config needs a [tools] section with names = ...")
    names = [n.strip() for n in parser["tools"].get("names", "").split(",") if n.strip()]
    tools: dict[str, ToolBackend] = {}
    for name in names:
        sec_name = f"tool.{name}"
        sec = parser[sec_name] if parser.has_section(sec_name) else {}
        endpoint = ToolEndpointConfig(
            name=name,
            base_latency_ms=float(sec.get("base_latency_ms", 300.0)),
            latency_jitter_ms=float(sec.get("latency_jitter_ms", 0.0)),
            cost_per_call_usd=float(sec.get("cost_per_call_usd", 0.005)),
            rate_limit_per_min=int(sec.get("rate_limit_per_min", 100)),
            max_retries=int(sec.get("max_retries", 8)),
            backoff_base_ms=float(sec.get("backoff_base_ms", 100.0)),
        )
        tools[name] = ToolBackend(endpoint=endpoint,
                                  url_template=sec.get("url_template", ""),
                                  auth_env=sec.get("auth_env", ""))
    return ServiceConfig(
        host=svc.get("host", "127.0.0.1"),
        port=int(svc.get("port", 8123)),
        mode=svc.get("mode", "full"),
        context_chars=int(svc.get("context_chars", 0)),
        table_path=svc.get("table_path", ""),
        validation_path=svc.get("validation_path", ""),
        state_path=svc.get("state_path", "cache.state"),
        prefetch=svc.get("prefetch", "true").lower() in ("1", "true", "yes"),
        cache=cache,
        embed_dim=int(cache_sec.get("embed_dim", 256)),
        seed=int(cache_sec.get("seed", 1)),
        tools=tools,
    )


def build_proxy(config: ServiceConfig) -> ToolProxy:
    embedder = HashedBagEmbedder(dimension=config.embed_dim, seed=config.seed)
    engine = CacheEngine(config.cache, embedder, ReferenceJudge())
    clock = WallClock()
    ledger = CostLedger()
    table: dict[str, str] = {}
    aliases: dict[str, str] = {}
    if config.table_path:
        table, aliases = read_service_file(config.table_path)
    clients: dict[str, RemoteToolClient] = {}
    for name, backend in config.tools.items():
        if backend.url_template:
            service = HttpTool(backend.url_template, auth_env=backend.auth_env or None)
        else:
            if not config.table_path:
                raise ConfigError(
                    f"tool {name!r} has no url_template and no table_path is set")
            service = SimulatedService(table, aliases,
                                       base_latency_ms=backend.endpoint.base_latency_ms,
                                       latency_jitter_ms=backend.endpoint.latency_jitter_ms,
                                       seed=config.seed)
        limiter = SlidingWindowRateLimiter(backend.endpoint.rate_limit_per_min)
        clients[name] = RemoteToolClient(backend.endpoint, service, limiter,
                                         ledger, clock=clock)
    prefetcher = None
    if config.mode == "full" and config.prefetch:
        def spawn(gen):
            threading.Thread(target=drive_blocking, args=(gen,), daemon=True).start()
        prefetcher = Prefetcher(MarkovModel(), engine, clients, clock, spawn,
                                theta=config.cache.prefetch_theta)
    return ToolProxy(engine, clients, mode=config.mode, prefetcher=prefetcher,
                     stage_costs=StageCosts(), clock=clock,
                     context_chars=config.context_chars)


def parse_body(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, sep, value = line.partition(":")
        if not sep:
            raise SemcacheError(f"malformed body line {line!r}")
        fields[name.strip()] = value.strip()
    return fields


def render_body(pairs: dict) -> str:
    return "".join(f"{k}: {v}\n" for k, v in pairs.items())


class CacheService:
    """Threaded HTTP wrapper; one proxy shared across handler threads."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.proxy = build_proxy(config)
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                pass

            def _reply(self, status: int, pairs: dict) -> None:
                payload = render_body(pairs).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "text/plain; charset=utf-8")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def _body(self) -> str:
                length = int(self.headers.get("Content-Length", 0))
                return self.rfile.read(length).decode("utf-8") if length else ""

            def do_GET(self):
                if self.path == "/stats":
                    self._reply(200, service.stats())
                else:
                    self._reply(404, {"error": "unknown path"})

            def do_POST(self):
                try:
                    fields = parse_body(self._body())
                    if self.path == "/query":
                        self._reply(200, service.query(fields))
                    elif self.path == "/admin/recalibrate":
                        self._reply(200, service.recalibrate(fields))
                    elif self.path == "/admin/snapshot":
                        self._reply(200, service.snapshot(fields))
                    else:
                        self._reply(404, {"error": "unknown path"})
                except SemcacheError as exc:
                    self._reply(400, {"error": escape_text(str(exc))})

        self._httpd = ThreadingHTTPServer((config.host, config.port), Handler)
        self._httpd.daemon_threads = False  # drain in-flight on close
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._httpd.server_address[:2]
        return str(host), int(port)

    # ---- endpoint bodies ----

    def query(self, fields: dict[str, str]) -> dict:
        tool = fields.get("tool", "")
        text = unescape_text(fields.get("text", ""))
        context = unescape_text(fields.get("context", ""))
        if not tool or not text.strip():
            raise SemcacheError("query needs tool and text fields")
        call = ToolCall(tool=tool, query_text=text, raw_span=(0, len(text)))
        result = self.proxy.handle(call, context=context)
        out = {
            "value": escape_text(result.value),
            "source": result.source,
            "kind": result.outcome.kind,
        }
        if result.outcome.similarity is not None:
            out["similarity"] = repr(result.outcome.similarity)
        if result.outcome.s_lsm is not None:
            out["s_lsm"] = repr(result.outcome.s_lsm)
        if result.error:
            out["error"] = escape_text(result.error)
        return out

    def stats(self) -> dict:
        eng = self.proxy.engine.stats()
        out = {f"engine_{k}": v for k, v in eng.items()}
        p = self.proxy.stats
        out.update(served=p.served, cache_hits=p.cache_hits,
                   remote_fetches=p.remote_fetches, errors=p.errors,
                   not_found=p.not_found,
                   capacity_tokens=self.proxy.engine.config.capacity_tokens,
                   tau_sim=repr(self.proxy.engine.config.tau_sim),
                   tau_lsm=repr(self.proxy.engine.config.tau_lsm),
                   mode=self.proxy.mode)
        ledgers = {id(c.ledger): c.ledger for c in self.proxy.clients.values()}
        totals = [led.totals() for led in ledgers.values()]
        out["api_calls"] = sum(t.call_count + t.not_found_count for t in totals)
        out["api_cost_usd"] = repr(sum(t.api_cost_usd for t in totals))
        out["retries"] = sum(t.retry_count for t in totals)
        return out

    def recalibrate(self, fields: dict[str, str]) -> dict:
        if not self.config.validation_path:
            raise SemcacheError("no validation_path configured")
        validation = read_validation(self.config.validation_path)
        kwargs = {}
        if "p_target" in fields:
            kwargs["p_target"] = float(fields["p_target"])
        if "sample_budget" in fields:
            kwargs["sample_budget"] = int(fields["sample_budget"])
        if "tool" in fields:
            kwargs["tool"] = fields["tool"]
        result = self.proxy.recalibrate_now(validation, **kwargs)
        return {
            "tau_lsm": repr(result.tau_lsm),
            "feasible": str(result.feasible).lower(),
            "annotated": result.annotated,
            "dropped": result.dropped,
        }

    def snapshot(self, fields: dict[str, str]) -> dict:
        path = unescape_text(fields.get("path", "")) or self.config.state_path
        self.proxy.save(path)
        return {"ok": "true", "path": escape_text(path)}

    # ---- lifecycle ----

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10)
