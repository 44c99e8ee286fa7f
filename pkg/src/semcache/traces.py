"""Synthetic workload traces.

Queries are built from per-cluster token bags: every paraphrase of a
cluster is a distinct permutation of the same bag, so in-cluster pairs
are maximally similar to the reference embedder while different
clusters stay far apart. Distractor clusters reuse a base cluster's bag
with exactly one content token swapped, which puts them above the
vector threshold but below what the judge will accept. Canonical
answers repeat every content word of their bag, padded with neutral
filler to a fixed token size.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from random import Random

from .errors import ConfigError, ValidationError

_SUBJECTS = ("everest", "nile", "jupiter", "beethoven", "kyoto", "sahara",
             "pacific", "danube", "kilimanjaro", "baikal", "andes", "gobi",
             "yangtze", "fuji", "serengeti", "vesuvius")
_FEATURES = ("summit", "basin", "orbit", "sonata", "temple", "dunes",
             "trench", "delta", "glacier", "shoreline", "ridge", "plateau",
             "gorge", "foothills", "savanna", "crater")
_ASPECTS = ("elevation", "span", "radius", "tempo", "layout", "expanse",
            "breadth", "drainage", "thickness", "contour", "gradient",
            "relief", "incline", "footprint", "canopy", "rim")
_UNITS = ("meters", "kilometers", "tonnes", "minutes", "hectares", "fathoms",
          "degrees", "litres", "acres", "knots", "joules", "watts", "lumens",
          "pascals", "carats", "grams")
_CATALOGS = ("atlas", "ledger", "gazette", "almanac", "codex", "registry",
             "yearbook", "chronicle", "compendium", "manifest", "digest",
             "inventory", "handbook", "bulletin", "lexicon", "gazetteer")
_VERBS = ("measured", "documented", "tabulated", "surveyed", "charted",
          "recorded", "verified", "compiled", "annotated", "indexed",
          "mapped", "appraised", "assessed", "calibrated", "plotted", "logged")
_FILLER = ("figures", "cross", "checked", "against", "field", "notes",
           "printed", "appendix", "tables", "margins", "plates", "folio",
           "errata", "citations", "footnotes", "revisions", "volumes",
           "bindings", "chapters", "sections", "columns", "rows", "labels",
           "symbols", "glyphs", "panels", "sheets", "quires", "leaves",
           "facsimile")

MAX_CLUSTERS = len(_SUBJECTS)


@dataclass(frozen=True)
class TraceEvent:
    arrival: float
    tool: str
    query_text: str
    cluster_id: int
    ground_truth_key: str


@dataclass(frozen=True)
class ClusterSpec:
    cluster_id: int
    tool: str
    gt_key: str
    bag: tuple[str, ...]
    answer: str
    paraphrases: tuple[str, ...]


@dataclass
class Trace:
    events: list[TraceEvent]
    table: dict[str, str]
    clusters: list[ClusterSpec]
    alias_map: dict[str, str] | None = None

    def aliases(self) -> dict[str, str]:
        """query text -> ground-truth key, for the simulated service."""
        if self.alias_map is not None:
            return self.alias_map
        out: dict[str, str] = {}
        for spec in self.clusters:
            for p in spec.paraphrases:
                out[p] = spec.gt_key
        return out

    def unique_result_tokens(self) -> int:
        """Denominator for the cache-ratio knob: total tokens across the
        distinct canonical results this trace can serve."""
        return sum(len(r.split()) for r in self.table.values())


def _bag(idx: int, ephemeral: bool, unit_override: int | None = None) -> tuple[str, ...]:
    unit = _UNITS[idx if unit_override is None else unit_override]
    core = ["what", "is", "the", _ASPECTS[idx], "of", "the", _SUBJECTS[idx],
            _FEATURES[idx], "in", unit, _CATALOGS[idx]]
    if ephemeral:
        core = core[:3] + ["latest"] + core[3:] + ["today"]
    return tuple(core)


def _answer(idx: int, ephemeral: bool, unit_override: int | None,
            answer_tokens: int, rng: Random, variant: int = 0) -> str:
    unit = _UNITS[idx if unit_override is None else unit_override]
    number = 120 + 37 * idx + 13 * variant
    words = ["the", _ASPECTS[idx], "of", "the", _SUBJECTS[idx], _FEATURES[idx]]
    if ephemeral:
        words = ["the", "latest", _ASPECTS[idx], "of", "the", _SUBJECTS[idx],
                 _FEATURES[idx], "today"]
    words += ["is", str(number), unit, "as", _VERBS[idx], "in", "the",
              _CATALOGS[idx], "edition", str(1900 + idx + variant)]
    while len(words) < answer_tokens:
        words.append(_FILLER[rng.randrange(len(_FILLER))])
    return " ".join(words[:max(answer_tokens, len(words))])


def _permute(bag: tuple[str, ...], rng: Random) -> str:
    tokens = list(bag)
    rng.shuffle(tokens)
    return " ".join(tokens)


def build_clusters(n: int, paraphrases_per_cluster: int, seed: int, *,
                   tool: str = "search", answer_tokens: int = 60,
                   ephemeral_ids: frozenset[int] = frozenset(),
                   distractor_of: dict[int, int] | None = None,
                   tool_of: dict[int, str] | None = None,
                   answer_tokens_of: dict[int, int] | None = None) -> list[ClusterSpec]:
    """Build n cluster specs with distinct content vocabulary.

    distractor_of maps a cluster id to the base cluster it shadows: the
    distractor inherits the base bag with its unit token swapped, which
    keeps the surface similarity just above the default tau_sim.
    """
    if not (1 <= n <= MAX_CLUSTERS):
        raise ConfigError(f"cluster count must be in [1, {MAX_CLUSTERS}]")
    if paraphrases_per_cluster < 1:
        raise ConfigError("need at least one paraphrase per cluster")
    distractor_of = distractor_of or {}
    tool_of = tool_of or {}
    answer_tokens_of = answer_tokens_of or {}
    specs = []
    for cid in range(n):
        base = distractor_of.get(cid)
        ephemeral = cid in ephemeral_ids
        if base is None:
            idx, unit_override, variant = cid, None, 0
        else:
            if base not in range(n) or base in distractor_of:
                raise ConfigError(f"distractor base {base} is not a regular cluster")
            idx, unit_override, variant = base, (base + 8) % len(_UNITS), 1 + cid
        bag = _bag(idx, ephemeral, unit_override)
        rng = Random(f"{seed}:answer:{cid}")
        answer = _answer(idx, ephemeral, unit_override,
                         answer_tokens_of.get(cid, answer_tokens), rng, variant)
        seen: set[str] = set()
        paraphrases = []
        for k in range(paraphrases_per_cluster):
            if k == 0:
                text = " ".join(bag)
            else:
                prng = Random(f"{seed}:para:{cid}:{k}")
                text = _permute(bag, prng)
                while text in seen:
                    text = _permute(bag, prng)
            seen.add(text)
            paraphrases.append(text)
        gt_key = f"{_SUBJECTS[idx]}-{_ASPECTS[idx]}" if base is None else \
            f"{_SUBJECTS[idx]}-{_ASPECTS[idx]}-alt{variant}"
        specs.append(ClusterSpec(
            cluster_id=cid,
            tool=tool_of.get(cid, tool),
            gt_key=gt_key,
            bag=bag,
            answer=answer,
            paraphrases=tuple(paraphrases),
        ))
    return specs


def _assemble(events: list[TraceEvent], specs: list[ClusterSpec]) -> Trace:
    table = {s.gt_key: s.answer for s in specs}
    if len(table) != len(specs):
        raise ConfigError("ground-truth keys collide across clusters")
    return Trace(events=events, table=table, clusters=specs)


def gen_zipf_trace(clusters: int, paraphrases_per_cluster: int, n_events: int,
                   zipf_s: float, seed: int, *, tool: str = "search",
                   answer_tokens: int = 60, spacing_s: float = 0.0) -> Trace:
    """Cluster popularity proportional to rank^(-zipf_s)."""
    if zipf_s <= 0:
        raise ConfigError("zipf_s must be positive")
    if n_events < 1:
        raise ConfigError("n_events must be >= 1")
    specs = build_clusters(clusters, paraphrases_per_cluster, seed, tool=tool,
                           answer_tokens=answer_tokens)
    weights = [1.0 / ((rank + 1) ** zipf_s) for rank in range(clusters)]
    rng = Random(f"{seed}:zipf")
    events = []
    for i in range(n_events):
        cid = rng.choices(range(clusters), weights=weights, k=1)[0]
        spec = specs[cid]
        text = spec.paraphrases[rng.randrange(len(spec.paraphrases))]
        events.append(TraceEvent(arrival=i * spacing_s, tool=spec.tool,
                                 query_text=text, cluster_id=cid,
                                 ground_truth_key=spec.gt_key))
    return _assemble(events, specs)


def gen_weighted_trace(weights: list[float], paraphrases_per_cluster: int,
                       n_events: int, seed: int, *, tool: str = "search",
                       answer_tokens: int = 60, spacing_s: float = 0.0,
                       ephemeral_ids: frozenset[int] = frozenset(),
                       distractor_of: dict[int, int] | None = None,
                       tool_of: dict[int, str] | None = None,
                       answer_tokens_of: dict[int, int] | None = None) -> Trace:
    """Explicit per-cluster popularity; the shape behind the mixed-cost
    and distractor workloads."""
    specs = build_clusters(len(weights), paraphrases_per_cluster, seed,
                           tool=tool, answer_tokens=answer_tokens,
                           ephemeral_ids=ephemeral_ids,
                           distractor_of=distractor_of, tool_of=tool_of,
                           answer_tokens_of=answer_tokens_of)
    rng = Random(f"{seed}:weighted")
    events = []
    for i in range(n_events):
        cid = rng.choices(range(len(weights)), weights=weights, k=1)[0]
        spec = specs[cid]
        text = spec.paraphrases[rng.randrange(len(spec.paraphrases))]
        events.append(TraceEvent(arrival=i * spacing_s, tool=spec.tool,
                                 query_text=text, cluster_id=cid,
                                 ground_truth_key=spec.gt_key))
    return _assemble(events, specs)


# -------- trend-shaped arrivals --------

def _hann_cdf_inverse(q: float, peak: float, width: float) -> float:
    """Quantile of the raised-cosine bump centered on peak (support ±width)."""
    if width <= 0:
        return peak
    lo, hi = peak - width, peak + width

    def cdf(t: float) -> float:
        x = (t - peak) / width
        return 0.5 * (1 + x + math.sin(math.pi * x) / math.pi)

    for _ in range(60):
        mid = (lo + hi) / 2
        if cdf(mid) < q:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def gen_trend_trace(topics: list[tuple[float, float]], duration: float, seed: int, *,
                    paraphrases_per_cluster: int = 12, width_s: float | None = None,
                    follower_lag_s: float | None = None, follower_scale: float = 0.5,
                    tool: str = "search", answer_tokens: int = 60) -> Trace:
    """Bursty topics: each topic fires `intensity` events under a
    raised-cosine envelope around its peak; every topic also spawns a
    correlated follower topic peaking follower_lag_s later at
    follower_scale of the intensity (set follower_scale=0 to disable).
    """
    if duration <= 0:
        raise ConfigError("duration must be positive")
    if not topics:
        raise ConfigError("at least one topic required")
    width = duration / 8.0 if width_s is None else width_s
    lag = duration / 10.0 if follower_lag_s is None else follower_lag_s
    shapes = [(peak, intensity) for peak, intensity in topics]
    if follower_scale > 0:
        shapes += [(peak + lag, intensity * follower_scale)
                   for peak, intensity in topics]
    specs = build_clusters(len(shapes), paraphrases_per_cluster, seed, tool=tool,
                           answer_tokens=answer_tokens)
    rng = Random(f"{seed}:trend")
    events = []
    for cid, (peak, intensity) in enumerate(shapes):
        n = int(round(intensity))
        spec = specs[cid]
        for j in range(n):
            q = (j + 0.5) / n
            t = _hann_cdf_inverse(q, peak, width)
            t = min(max(t, 0.0), duration)
            text = spec.paraphrases[rng.randrange(len(spec.paraphrases))]
            events.append(TraceEvent(arrival=t, tool=spec.tool, query_text=text,
                                     cluster_id=cid, ground_truth_key=spec.gt_key))
    events.sort(key=lambda e: (e.arrival, e.cluster_id))
    return _assemble(events, specs)


# -------- repository file-access trace --------

DEFAULT_REPO_FILES = (
    ("src/core/parser.py", 1.0),
    ("src/core/runtime.py", 0.28),
    ("docs/guide/setup.md", 0.22),
    ("src/util/strings.py", 0.14),
    ("tests/test_runtime.py", 0.10),
    ("src/core/tokens.py", 0.08),
    ("configs/default.ini", 0.04),
    ("src/io/loader.py", 0.04),
    ("scripts/build.sh", 0.04),
)

_REPO_SCAFFOLD = ("open", "the", "source", "file", "from", "the", "project",
                  "checkout", "tree")


def _path_tokens(path: str) -> list[str]:
    out = []
    for part in path.replace("/", " ").replace(".", " ").replace("_", " ").split():
        out.append(part.lower())
    return out


def gen_repo_trace(file_freqs, n_tasks: int, seed: int, *,
                   paraphrases_per_file: int = 6, tool: str = "file_read",
                   task_spacing_s: float = 1.0, answer_tokens: int = 48) -> Trace:
    """Agent coding sessions: each task touches file i with probability
    freq_i; query texts are shuffled request phrasings around the path."""
    files = list(file_freqs)
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    for path, freq in files:
        if not (0.0 < freq <= 1.0):
            raise ConfigError(f"frequency for {path} must be in (0, 1]")
    specs = []
    for cid, (path, _) in enumerate(files):
        bag = tuple(list(_REPO_SCAFFOLD) + _path_tokens(path))
        rng = Random(f"{seed}:repofill:{cid}")
        words = ["contents", "of"] + _path_tokens(path) + \
            ["spanning", str(40 + 7 * cid), "lines", "under", "version", "control"]
        while len(words) < answer_tokens:
            words.append(_FILLER[rng.randrange(len(_FILLER))])
        answer = " ".join(words)
        seen: set[str] = set()
        paraphrases = []
        for k in range(paraphrases_per_file):
            if k == 0:
                text = " ".join(bag)
            else:
                prng = Random(f"{seed}:repopara:{cid}:{k}")
                text = _permute(bag, prng)
                while text in seen:
                    text = _permute(bag, prng)
            seen.add(text)
            paraphrases.append(text)
        specs.append(ClusterSpec(cluster_id=cid, tool=tool, gt_key=path,
                                 bag=bag, answer=answer,
                                 paraphrases=tuple(paraphrases)))
    rng = Random(f"{seed}:repo")
    events = []
    for task in range(n_tasks):
        offset = 0
        for cid, (path, freq) in enumerate(files):
            if rng.random() < freq:
                spec = specs[cid]
                text = spec.paraphrases[rng.randrange(len(spec.paraphrases))]
                events.append(TraceEvent(
                    arrival=task * task_spacing_s + offset * 0.01,
                    tool=tool, query_text=text, cluster_id=cid,
                    ground_truth_key=path))
                offset += 1
    return _assemble(events, specs)


# -------- file round trip --------
#
# One event per line: arrival, tool, cluster_id, ground_truth_key,
# query_text, tab-separated.

def write_trace(path: str, events: list[TraceEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            for fieldval in (ev.tool, ev.ground_truth_key, ev.query_text):
                if "\t" in fieldval or "\n" in fieldval:
                    raise ValidationError("trace fields must be single-line, tab-free")
            fh.write(f"{ev.arrival!r}\t{ev.tool}\t{ev.cluster_id}\t"
                     f"{ev.ground_truth_key}\t{ev.query_text}\n")


def read_trace(path: str) -> list[TraceEvent]:
    events = []
    if not os.path.exists(path):
        raise ConfigError(f"cannot read trace file {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValidationError(f"{path}:{i}: expected 5 tab-separated fields")
            events.append(TraceEvent(arrival=float(parts[0]), tool=parts[1],
                                     cluster_id=int(parts[2]),
                                     ground_truth_key=parts[3],
                                     query_text=parts[4]))
    return events
