"""Semantic validation of candidate matches.

A candidate from the vector stage is only a hit once the judge agrees
the cached entry answers the new query. The reference judge blends
content-word overlap between the two queries with how much of the query
the cached result actually covers; it also estimates staticity, the
rough shelf life of a result, from lexical signals.
"""

from __future__ import annotations

import urllib.error
import urllib.request
from dataclasses import dataclass
from math import inf, nextafter
from typing import Protocol

from .embedder import tokenize
from .errors import RetriableError, ValidationError

STOPWORDS = frozenset("""
a an the is are was were be been being am do does did done has have had
by of in on at to for from with about as into onto over under and or nor
not no it its this that these those there here what which who whom whose
when where why how me my mine i you your yours we our ours they their
theirs he him his she her hers them us will would can could shall should
may might must just please tell show give find get went gone go very so
s t d ll m re ve up down out off than then too also if but while because
""".split())

OVERLAP_WEIGHT = 0.8
COVERAGE_WEIGHT = 0.2

_FACT_WORDS = frozenset("""
who whom where what when which is was were are capital located location
painted wrote author composer invented discovered founded born died
defined definition formula height depth distance speed boiling melting
atomic currency population area language anthem
""".split())

_EPHEMERAL_WORDS = frozenset("""
today tonight yesterday tomorrow now current currently latest recent
recently weather temperature rain price prices stock stocks market news
score scores forecast trending live breaking update updates headline
headlines traffic schedule openings
""".split())

_STATICITY_DEFAULT = 5


def content_words(text: str) -> set[str]:
    return {t for t in tokenize(text) if t not in STOPWORDS}


class Judge(Protocol):
    def score(self, query: str, cached_query: str, cached_result: str) -> float: ...

    def staticity(self, query: str, result: str) -> int: ...


class ReferenceJudge:
    """Deterministic lexical judge.

    score = 0.8 * jaccard(content(query), content(cached_query))
          + 0.2 * coverage(content(query), tokens(cached_result))

    Identical normalized token sequences score 1.0 outright. Queries
    with disjoint tokens can never clear a threshold above 0.2.
    """

    def score(self, query: str, cached_query: str, cached_result: str) -> float:
        q_tokens = tokenize(query)
        c_tokens = tokenize(cached_query)
        if q_tokens == c_tokens:
            return 1.0
        q_content = {t for t in q_tokens if t not in STOPWORDS}
        c_content = {t for t in c_tokens if t not in STOPWORDS}
        if not q_content and not c_content:
            overlap = 1.0
        elif not q_content or not c_content:
            overlap = 0.0
        else:
            union = q_content | c_content
            overlap = len(q_content & c_content) / len(union)
        if q_content:
            result_tokens = set(tokenize(cached_result))
            coverage = len(q_content & result_tokens) / len(q_content)
        else:
            coverage = 1.0
        return OVERLAP_WEIGHT * overlap + COVERAGE_WEIGHT * coverage

    def staticity(self, query: str, result: str) -> int:
        return score_staticity(query, result)


def score_staticity(query: str, result: str) -> int:
    """Estimate shelf life on a 1..10 scale from lexical signals.

    Fact-pattern words push the estimate up, freshness words push it
    down, and with no signal either way the judge abstains at 5.
    """
    seen = set(tokenize(query)) | set(tokenize(result))
    fact_hits = len(seen & _FACT_WORDS)
    ephemeral_hits = len(seen & _EPHEMERAL_WORDS)
    if fact_hits == 0 and ephemeral_hits == 0:
        return _STATICITY_DEFAULT
    raw = _STATICITY_DEFAULT + 2 * fact_hits - 3 * ephemeral_hits
    return max(1, min(10, raw))


class HttpJudge:
    """Client for an external judge service speaking the key-value protocol.

    Staticity stays local: the lexical estimate is cheap and does not
    need a model round trip.
    """

    def __init__(self, url: str, timeout_s: float = 10.0):
        self.url = url
        self.timeout_s = timeout_s

    def score(self, query: str, cached_query: str, cached_result: str) -> float:
        flat = lambda s: s.replace("\n", " ")
        body = (
            f"query: {flat(query)}\n"
            f"cached_query: {flat(cached_query)}\n"
            f"cached_result: {flat(cached_result)}\n"
        ).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                payload = resp.read().decode("utf-8")
        except (urllib.error.URLError, OSError) as exc:
            raise RetriableError(f"judge service unavailable: {exc}") from exc
        for line in payload.splitlines():
            if line.startswith("score:"):
                return float(line.split(":", 1)[1].strip())
        raise RetriableError("judge service response missing 'score:' line")

    def staticity(self, query: str, result: str) -> int:
        return score_staticity(query, result)


# -------- threshold recalibration --------


@dataclass(frozen=True)
class LogEntry:
    """One served hit: what was asked, what we returned, and the judge score."""

    query: str
    served_result: str
    cached_query: str
    s_lsm: float


@dataclass(frozen=True)
class AnnotatedSample:
    query: str
    cached_result: str
    s_lsm: float
    label: bool  # correct per ground truth, never per the judge itself


@dataclass(frozen=True)
class RecalibrationResult:
    tau_lsm: float
    feasible: bool
    curve: tuple[tuple[float, float], ...]  # (threshold, precision) ascending
    annotated: int
    dropped: int


def evaluate_equal(query: str, served_result: str, ground_result: str) -> bool:
    """Default ground-truth evaluator: served text must match exactly."""
    return served_result == ground_result


def sample_diverse(recent_log, n: int, embedder) -> list[LogEntry]:
    """Greedy farthest-point subset of the log's queries, capped at n.

    Starts from the oldest entry; each step adds the entry farthest (in
    embedding space) from everything already chosen, so duplicates
    collapse and distinct regions of query space all get a vote.
    Deterministic given the log order.
    """
    if n < 1:
        raise ValidationError("sample size must be >= 1")
    entries = list(recent_log)
    if not entries:
        return []
    vecs = [embedder.embed(e.query) for e in entries]
    chosen = [0]
    min_d = [_dist(vecs[i], vecs[0]) for i in range(len(entries))]
    while len(chosen) < min(n, len(entries)):
        best = max(range(len(entries)), key=lambda i: (min_d[i], -i))
        if min_d[best] <= 0.0:
            break
        chosen.append(best)
        for i in range(len(entries)):
            d = _dist(vecs[i], vecs[best])
            if d < min_d[i]:
                min_d[i] = d
    return [entries[i] for i in sorted(chosen)]


def _dist(a, b) -> float:
    return sum((x - y) ** 2 for x, y in zip(a.components, b.components)) ** 0.5


def precision_curve(samples) -> list[tuple[float, float]]:
    """Precision of the would-be hits at every distinct observed score.

    Between observed scores precision is a step function, so evaluating
    at the observed scores is exhaustive.
    """
    pts = sorted({s.s_lsm for s in samples})
    curve = []
    for t in pts:
        kept = [s for s in samples if s.s_lsm >= t]
        correct = sum(1 for s in kept if s.label)
        curve.append((t, correct / len(kept)))
    return curve


def find_threshold(curve, p_target: float, max_score: float) -> tuple[float, bool]:
    """Smallest threshold meeting p_target, else a flagged above-max value."""
    for t, precision in curve:
        if precision >= p_target:
            return t, True
    return nextafter(max_score, inf), False


def recalibrate(judge, recent_log, validation_set, p_target: float, *,
                fetch_gt, evaluate_gt=evaluate_equal, embedder,
                sample_budget: int = 5) -> RecalibrationResult:
    """Offline threshold tuning from recent traffic.

    Samples a diverse subset of the recent hit log (budget default 5,
    one maintenance cycle per simulated minute), labels each sample
    against freshly fetched ground truth, folds the annotated samples
    into the validation set, and returns the smallest threshold whose
    validation precision clears p_target. When no threshold does, the
    returned value sits strictly above every observed score (nothing
    can pass until the judge or corpus improves) and is flagged.
    """
    if not validation_set:
        raise ValidationError("validation set must be non-empty")
    subset = sample_diverse(recent_log, sample_budget, embedder)
    annotated = []
    dropped = 0
    for entry in subset:
        try:
            ground = fetch_gt(entry.query)
        except Exception:
            dropped += 1
            continue
        label = bool(evaluate_gt(entry.query, entry.served_result, ground))
        annotated.append(AnnotatedSample(entry.query, entry.served_result,
                                         entry.s_lsm, label))
    if subset and not annotated:
        raise RetriableError("ground truth unavailable for every sampled log entry")
    pool = list(validation_set) + annotated
    scored = []
    for s in pool:
        if s.s_lsm is None:
            # no recorded score: judge the result text directly
            s = AnnotatedSample(s.query, s.cached_result,
                                judge.score(s.query, s.cached_result,
                                            s.cached_result), s.label)
        scored.append(s)
    curve = precision_curve(scored)
    max_score = max(s.s_lsm for s in scored)
    tau, feasible = find_threshold(curve, p_target, max_score)
    return RecalibrationResult(tau_lsm=tau, feasible=feasible, curve=tuple(curve),
                               annotated=len(annotated), dropped=dropped)


# -------- validation set files: query, cached_result, s_lsm, label --------

def write_validation(path: str, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            for v in (s.query, s.cached_result):
                if "\t" in v or "\n" in v:
                    raise ValidationError("validation fields must be single-line, tab-free")
            score = "none" if s.s_lsm is None else repr(s.s_lsm)
            fh.write(f"{s.query}\t{s.cached_result}\t{score}\t"
                     f"{'true' if s.label else 'false'}\n")


def read_validation(path: str) -> list[AnnotatedSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in ("true", "false"):
                raise ValidationError(
                    f"{path}:{i}: expected 'query<TAB>result<TAB>score<TAB>label'")
            score = None if parts[2] == "none" else float(parts[2])
            samples.append(AnnotatedSample(query=parts[0], cached_result=parts[1],
                                           s_lsm=score, label=parts[3] == "true"))
    return samples
