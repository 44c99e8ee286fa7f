"""Discrete-event simulation of priority-aware co-location.

Two task classes share one box: agent requests and judge validations.
Compute is statically partitioned (each class's task duration is its
service demand divided by the class share); memory is the concurrency
limiter, satisfied from the class's static pool first with overflow
from a unified dynamic pool. The agent queue is drained exhaustively;
a judge batch is considered only when the agent queue is empty or its
head cannot obtain memory. No preemption; deterministic event order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from random import Random

from .errors import ConfigError, ValidationError

KINDS = ("agent", "judge")


@dataclass(frozen=True)
class SimTask:
    kind: str
    arrival: float
    service_demand: float
    memory_demand: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.service_demand <= 0 or self.memory_demand <= 0:
            raise ValidationError("service and memory demands must be positive")
        if self.arrival < 0:
            raise ValidationError("arrival must be >= 0")


@dataclass(frozen=True)
class SchedulerConfig:
    agent_compute_share: float = 0.8
    judge_compute_share: float = 0.2
    static_memory_agent: float = 24.0
    static_memory_judge: float = 4.0
    dynamic_pool: float = 16.0
    judge_batch_size: int = 8

    def __post_init__(self):
        if not (0.0 < self.agent_compute_share < 1.0):
            raise ConfigError("agent_compute_share must be in (0, 1)")
        if abs(self.agent_compute_share + self.judge_compute_share - 1.0) > 1e-9:
            raise ConfigError("compute shares must sum to 1")
        for name in ("static_memory_agent", "static_memory_judge", "dynamic_pool"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.judge_batch_size < 1:
            raise ConfigError("judge_batch_size must be >= 1")


@dataclass(frozen=True)
class DispatchEvent:
    time: float
    kind: str
    batch: int
    agent_queue_len: int
    agent_head_fits: bool


@dataclass(frozen=True)
class ClassStats:
    count: int
    mean_wait: float
    p99_wait: float
    max_wait: float
    throughput: float


@dataclass
class ColocResult:
    agent: ClassStats
    judge: ClassStats
    makespan: float
    dispatch_log: list[DispatchEvent] = field(default_factory=list)


def _p99(waits: list[float]) -> float:
    if not waits:
        return 0.0
    s = sorted(waits)
    idx = max(0, min(len(s) - 1, -(-99 * len(s) // 100) - 1))
    return s[idx]


class _Pools:
    """Static-first memory accounting with a shared dynamic overflow."""

    def __init__(self, config: SchedulerConfig):
        self.static_free = {"agent": config.static_memory_agent,
                            "judge": config.static_memory_judge}
        self.dynamic_free = config.dynamic_pool

    def fits(self, task: SimTask) -> bool:
        return task.memory_demand <= self.static_free[task.kind] + self.dynamic_free

    def take(self, task: SimTask) -> tuple[float, float]:
        from_static = min(task.memory_demand, self.static_free[task.kind])
        from_dynamic = task.memory_demand - from_static
        if from_dynamic > self.dynamic_free + 1e-12:
            raise ValidationError("take() without fits() check")
        self.static_free[task.kind] -= from_static
        self.dynamic_free -= from_dynamic
        return from_static, from_dynamic

    def release(self, task_kind: str, grant: tuple[float, float]) -> None:
        self.static_free[task_kind] += grant[0]
        self.dynamic_free += grant[1]


def run_sim(tasks: list[SimTask], config: SchedulerConfig,
            horizon: float | None = None) -> ColocResult:
    """Run the co-location policy to completion (or horizon) and return
    per-class wait/throughput stats plus the judge-priority dispatch log.
    """
    share = {"agent": config.agent_compute_share,
             "judge": config.judge_compute_share}
    for i in range(1, len(tasks)):
        if tasks[i].arrival < tasks[i - 1].arrival:
            raise ValidationError("tasks must be sorted by arrival")
    for t in tasks:
        static = (config.static_memory_agent if t.kind == "agent"
                  else config.static_memory_judge)
        if t.memory_demand > static + config.dynamic_pool:
            raise ConfigError(
                f"{t.kind} task memory {t.memory_demand} exceeds available memory")

    pools = _Pools(config)
    queue = {"agent": [], "judge": []}  # FIFO lists of SimTask
    waits = {"agent": [], "judge": []}
    completed = {"agent": 0, "judge": 0}
    log: list[DispatchEvent] = []
    # event heap: (time, seq, tag, payload); tags: 0 arrival, 1 completion
    events: list = []
    seq = 0
    for t in tasks:
        heapq.heappush(events, (t.arrival, seq, 0, t))
        seq += 1
    now = 0.0
    makespan = 0.0

    def dispatch_pass():
        nonlocal seq
        # drain agents first
        while queue["agent"] and pools.fits(queue["agent"][0]):
            task = queue["agent"].pop(0)
            grant = pools.take(task)
            waits["agent"].append(now - task.arrival)
            log.append(DispatchEvent(now, "agent", 1, len(queue["agent"]), True))
            done = now + task.service_demand / share["agent"]
            heapq.heappush(events, (done, seq, 1, (task, grant)))
            seq += 1
        # judge batch only when agents cannot proceed
        agent_blocked = bool(queue["agent"]) and not pools.fits(queue["agent"][0])
        if queue["judge"] and (not queue["agent"] or agent_blocked):
            batch = 0
            while (queue["judge"] and batch < config.judge_batch_size
                   and pools.fits(queue["judge"][0])):
                task = queue["judge"].pop(0)
                grant = pools.take(task)
                waits["judge"].append(now - task.arrival)
                batch += 1
                done = now + task.service_demand / share["judge"]
                heapq.heappush(events, (done, seq, 1, (task, grant)))
                seq += 1
            if batch:
                log.append(DispatchEvent(
                    now, "judge", batch, len(queue["agent"]),
                    bool(queue["agent"]) and pools.fits(queue["agent"][0])))

    while events:
        now, _, tag, payload = heapq.heappop(events)
        if horizon is not None and now > horizon:
            now = horizon
            break
        if tag == 0:
            queue[payload.kind].append(payload)
        else:
            task, grant = payload
            pools.release(task.kind, grant)
            completed[task.kind] += 1
            makespan = max(makespan, now)
        # coalesce same-timestamp events before scheduling
        while events and events[0][0] == now:
            _, _, tag2, payload2 = heapq.heappop(events)
            if tag2 == 0:
                queue[payload2.kind].append(payload2)
            else:
                task, grant = payload2
                pools.release(task.kind, grant)
                completed[task.kind] += 1
                makespan = max(makespan, now)
        dispatch_pass()

    span = horizon if horizon is not None else makespan

    def cls(kind: str) -> ClassStats:
        w = waits[kind]
        return ClassStats(
            count=completed[kind],
            mean_wait=sum(w) / len(w) if w else 0.0,
            p99_wait=_p99(w),
            max_wait=max(w) if w else 0.0,
            throughput=completed[kind] / span if span > 0 else 0.0)

    return ColocResult(agent=cls("agent"), judge=cls("judge"),
                       makespan=makespan, dispatch_log=log)


def check_priority_safety(result: ColocResult) -> bool:
    """No judge dispatch may occur while the agent queue has a head that
    could have taken the memory instead."""
    return not any(ev.kind == "judge" and ev.agent_queue_len > 0 and ev.agent_head_fits
                   for ev in result.dispatch_log)


def dedicated_baseline(tasks: list[SimTask], config: SchedulerConfig) -> ColocResult:
    """Oracle run: the same agent stream with no judge class present."""
    return run_sim([t for t in tasks if t.kind == "agent"], config)


def gen_mixed_load(seed: int, n_agent: int = 400, n_judge: int = 1200, *,
                   agent_rate: float = 3.0, judge_rate: float = 9.0,
                   agent_service: float = 0.8, judge_service: float = 0.05,
                   agent_memory: tuple[float, float] = (4.0, 12.0),
                   judge_memory: float = 1.0) -> list[SimTask]:
    """Seeded open arrivals: exponential gaps, uniform agent memory,
    small fixed judge memory (single-token decode profile)."""
    rng = Random(f"{seed}:coloc")
    tasks: list[SimTask] = []
    t = 0.0
    for _ in range(n_agent):
        t += rng.expovariate(agent_rate)
        svc = agent_service * rng.uniform(0.5, 1.5)
        mem = rng.uniform(*agent_memory)
        tasks.append(SimTask("agent", t, svc, mem))
    t = 0.0
    for _ in range(n_judge):
        t += rng.expovariate(judge_rate)
        svc = judge_service * rng.uniform(0.8, 1.2)
        tasks.append(SimTask("judge", t, svc, judge_memory))
    tasks.sort(key=lambda x: (x.arrival, 0 if x.kind == "agent" else 1))
    return tasks


# -------- task file round trip: kind arrival service memory --------

def write_tasks(path: str, tasks: list[SimTask]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(f"{t.kind} {t.arrival!r} {t.service_demand!r} {t.memory_demand!r}\n")


def read_tasks(path: str) -> list[SimTask]:
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValidationError(f"{path}:{i}: expected 'kind arrival service memory'")
            tasks.append(SimTask(parts[0], float(parts[1]), float(parts[2]),
                                 float(parts[3])))
    return tasks


def render_coloc_report(result: ColocResult, baseline: ColocResult | None = None) -> str:
    lines = []
    for name, stats in (("agent", result.agent), ("judge", result.judge)):
        lines.append(f"{name}_count: {stats.count}")
        lines.append(f"{name}_mean_wait: {stats.mean_wait!r}")
        lines.append(f"{name}_p99_wait: {stats.p99_wait!r}")
        lines.append(f"{name}_max_wait: {stats.max_wait!r}")
        lines.append(f"{name}_throughput: {stats.throughput!r}")
    lines.append(f"makespan: {result.makespan!r}")
    lines.append(f"dispatches: {len(result.dispatch_log)}")
    lines.append(f"priority_safe: {check_priority_safety(result)}")
    if baseline is not None:
        lines.append(f"baseline_agent_p99_wait: {baseline.agent.p99_wait!r}")
        ratio = (result.agent.p99_wait / baseline.agent.p99_wait
                 if baseline.agent.p99_wait > 0 else float("inf"))
        lines.append(f"agent_p99_ratio: {ratio!r}")
    return "\n".join(lines) + "\n"
