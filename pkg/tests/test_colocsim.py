"""Co-location scheduler tests: hand-computed wait oracles, judge
batching, priority safety, baseline comparison."""

from __future__ import annotations

import pytest

from semcache.colocsim import (ColocResult, DispatchEvent, SchedulerConfig,
                               SimTask, check_priority_safety,
                               dedicated_baseline, gen_mixed_load, read_tasks,
                               render_coloc_report, run_sim, write_tasks)
from semcache.errors import ConfigError, ValidationError

CONFIG = SchedulerConfig()  # shares 0.8/0.2, memory 24/4 + 16 dynamic, batch 8


def test_task_and_config_validation():
    with pytest.raises(ValidationError):
        SimTask("tuner", 0.0, 1.0, 1.0)
    with pytest.raises(ValidationError):
        SimTask("agent", 0.0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        SimTask("agent", -1.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        SchedulerConfig(agent_compute_share=1.2, judge_compute_share=-0.2)
    with pytest.raises(ConfigError):
        SchedulerConfig(agent_compute_share=0.7, judge_compute_share=0.2)
    with pytest.raises(ConfigError):
        SchedulerConfig(judge_batch_size=0)


def test_run_sim_input_checks():
    tasks = [SimTask("agent", 1.0, 0.8, 4.0), SimTask("agent", 0.5, 0.8, 4.0)]
    with pytest.raises(ValidationError):
        run_sim(tasks, CONFIG)
    oversized = [SimTask("judge", 0.0, 0.05, 21.0)]  # 4 static + 16 dynamic
    with pytest.raises(ConfigError):
        run_sim(oversized, CONFIG)


def test_memory_blocking_waits_match_the_hand_oracle():
    # three agents of 20 memory each against 24 static + 16 dynamic:
    # two run at once, the third waits one full duration (0.8 / 0.8)
    tasks = [SimTask("agent", 0.0, 0.8, 20.0) for _ in range(3)]
    result = run_sim(tasks, CONFIG)
    assert result.agent.count == 3
    assert result.agent.mean_wait == pytest.approx(1.0 / 3)
    assert result.agent.max_wait == pytest.approx(1.0)
    assert result.agent.p99_wait == pytest.approx(1.0)
    assert result.makespan == pytest.approx(2.0)
    assert result.agent.throughput == pytest.approx(1.5)
    assert result.judge.count == 0


def test_judges_run_in_memory_limited_batches():
    # one agent holds all 40 units; judges squeeze into their 4 static
    # units, four at a time: dispatch waves at 0.0, 0.25, 0.5
    tasks = [SimTask("agent", 0.0, 0.8, 40.0)] + \
        [SimTask("judge", 0.0, 0.05, 1.0) for _ in range(12)]
    result = run_sim(tasks, CONFIG)
    judge_events = [ev for ev in result.dispatch_log if ev.kind == "judge"]
    assert [ev.batch for ev in judge_events] == [4, 4, 4]
    assert [ev.time for ev in judge_events] == \
        [pytest.approx(0.0), pytest.approx(0.25), pytest.approx(0.5)]
    assert result.judge.mean_wait == pytest.approx(0.25)
    assert result.judge.count == 12
    assert result.agent.count == 1
    assert check_priority_safety(result)


def test_judge_batch_size_caps_a_wide_open_box():
    tasks = [SimTask("judge", 0.0, 0.05, 0.1) for _ in range(20)]
    result = run_sim(tasks, CONFIG)
    batches = [ev.batch for ev in result.dispatch_log if ev.kind == "judge"]
    assert batches == [8, 8, 4]
    assert all(b <= CONFIG.judge_batch_size for b in batches)


def test_blocked_agent_head_lets_judges_through():
    tasks = [SimTask("agent", 0.0, 0.8, 40.0),
             SimTask("agent", 0.1, 0.8, 40.0),
             SimTask("judge", 0.1, 0.05, 1.0)]
    result = run_sim(tasks, CONFIG)
    judge_ev = next(ev for ev in result.dispatch_log if ev.kind == "judge")
    assert judge_ev.agent_queue_len == 1 and not judge_ev.agent_head_fits
    assert check_priority_safety(result)  # bypass of a blocked head is safe
    assert result.agent.mean_wait == pytest.approx(0.45)  # (0 + 0.9) / 2
    assert result.judge.max_wait == pytest.approx(0.0)
    assert result.makespan == pytest.approx(2.0)


def test_priority_checker_flags_a_bad_log():
    unsafe = ColocResult(
        agent=None, judge=None, makespan=1.0,
        dispatch_log=[DispatchEvent(0.0, "judge", 2, 3, True)])
    assert not check_priority_safety(unsafe)
    safe = ColocResult(agent=None, judge=None, makespan=1.0,
                       dispatch_log=[DispatchEvent(0.0, "judge", 2, 0, False)])
    assert check_priority_safety(safe)


def test_horizon_cuts_the_run_short():
    tasks = [SimTask("agent", 0.0, 0.8, 40.0)] + \
        [SimTask("judge", 0.0, 0.05, 1.0) for _ in range(12)]
    result = run_sim(tasks, CONFIG, horizon=0.3)
    assert result.judge.count == 4  # only the first wave finished
    assert result.agent.count == 0
    assert result.judge.throughput == pytest.approx(4 / 0.3)


def test_dedicated_baseline_strips_the_judge_class():
    tasks = gen_mixed_load(seed=7, n_agent=50, n_judge=150)
    base = dedicated_baseline(tasks, CONFIG)
    assert base.judge.count == 0
    agents_only = [t for t in tasks if t.kind == "agent"]
    direct = run_sim(agents_only, CONFIG)
    assert base.agent == direct.agent
    mixed = run_sim(tasks, CONFIG)
    assert mixed.agent.count == 50 and mixed.judge.count == 150
    assert check_priority_safety(mixed)


def test_gen_mixed_load_is_seeded_and_shaped():
    tasks = gen_mixed_load(seed=3, n_agent=40, n_judge=120)
    assert tasks == gen_mixed_load(seed=3, n_agent=40, n_judge=120)
    assert tasks != gen_mixed_load(seed=4, n_agent=40, n_judge=120)
    arrivals = [t.arrival for t in tasks]
    assert arrivals == sorted(arrivals)
    agents = [t for t in tasks if t.kind == "agent"]
    judges = [t for t in tasks if t.kind == "judge"]
    assert len(agents) == 40 and len(judges) == 120
    assert all(4.0 <= t.memory_demand <= 12.0 for t in agents)
    assert all(t.memory_demand == 1.0 for t in judges)
    assert all(0.4 <= t.service_demand <= 1.2 for t in agents)
    assert all(0.04 <= t.service_demand <= 0.06 for t in judges)


def test_task_file_round_trip(tmp_path):
    tasks = gen_mixed_load(seed=5, n_agent=10, n_judge=20)
    path = str(tmp_path / "tasks.txt")
    write_tasks(path, tasks)
    assert read_tasks(path) == tasks
    with open(path, "w") as fh:
        fh.write("agent 0.0 1.0\n")
    with pytest.raises(ValidationError):
        read_tasks(path)


def test_report_includes_safety_and_baseline_ratio():
    tasks = gen_mixed_load(seed=11, n_agent=30, n_judge=90)
    result = run_sim(tasks, CONFIG)
    base = dedicated_baseline(tasks, CONFIG)
    text = render_coloc_report(result, base)
    assert "priority_safe: True" in text
    assert "agent_p99_ratio:" in text
    assert "baseline_agent_p99_wait:" in text
    assert f"agent_count: {result.agent.count}" in text
