import math
import random
from collections import defaultdict
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from prodsys.datamodel import EventRange, TransformationSpec, parse_data_type
from prodsys.deft import Request, TaskState, TemplateStep, WorkflowState, WorkflowTemplate, compile_request
from prodsys.gridsim import (
    EngineConfig,
    EventKind,
    FailureModel,
    Fault,
    HorizonExceeded,
    InvalidWorkflow,
    RunLog,
    Site,
    broker_assign,
    execute_attempt,
    job_rng,
    run,
)
from prodsys.jedi import JobDefinition, OutcomeKind, RetryPolicy, ScoutConfig


def job(jid, cpu, first=0, count=1):
    return JobDefinition(jid, "T", EventRange(first, count), cpu)


# -- broker ------------------------------------------------------------------


def test_broker_spreads_equal_jobs():
    sites = [Site("slow", 1, 1.0), Site("fast", 1, 2.0)]
    plan = broker_assign([job("a", 10), job("b", 10)], sites)
    assert sorted(a.site for a in plan) == ["fast", "slow"]
    by_site = {a.site: a for a in plan}
    assert by_site["fast"].est_end < by_site["slow"].est_end


def test_broker_prefers_fast_site():
    (a,) = broker_assign([job("a", 10)], [Site("slow", 1, 1.0), Site("fast", 1, 2.0)])
    assert a.site == "fast" and a.est_end == 5.0


def test_broker_serialises_on_one_core():
    # hand-simulated greedy: 4 runs [0,4), 2 runs [4,6), 1 runs [6,7)
    plan = broker_assign([job("one", 1), job("four", 4), job("two", 2)], [Site("s", 1, 1.0)])
    assert [(a.job.id, a.start, a.est_end) for a in plan] == [("four", 0, 4), ("two", 4, 6), ("one", 6, 7)]


def test_broker_only_now_keeps_rest_queued():
    plan = broker_assign([job("a", 4), job("b", 2)], [Site("s", 1, 1.0)], now=3.0, only_now=True)
    assert [a.job.id for a in plan] == ["a"]
    busy = broker_assign([job("a", 4)], [Site("s", 1, 1.0)], now=3.0, core_free={"s": [10.0]}, only_now=True)
    assert busy == []


@given(
    cpus=st.lists(st.integers(1, 50), min_size=1, max_size=30),
    cores=st.lists(st.integers(1, 4), min_size=1, max_size=4),
)
def test_broker_never_overlaps_a_core(cpus, cores):
    sites = [Site(f"s{i}", c, 1.0 + i) for i, c in enumerate(cores)]
    plan = broker_assign([job(f"j{i}", c) for i, c in enumerate(cpus)], sites)
    assert len(plan) == len(cpus)
    for s in sites:
        intervals = sorted((a.start, a.est_end) for a in plan if a.site == s.id)
        for t in {start for start, _ in intervals}:
            assert sum(1 for a, b in intervals if a <= t < b) <= s.cores


# -- attempts ----------------------------------------------------------------


def test_attempt_deterministic_success():
    out = execute_attempt(job("a", 30.0, count=10), Site("s", 1, 1.5), random.Random(0))
    assert out.kind is OutcomeKind.SUCCESS and out.duration == 20.0 and out.corrupted_events == ()


def test_attempt_forced_permanent():
    site = Site("s", 1, 1.0, FailureModel(p_permanent=0.999999999))
    kinds = {execute_attempt(job("a", 1.0), site, job_rng(1, "a", k)).kind for k in range(200)}
    assert kinds == {OutcomeKind.PERMANENT}
    injected = execute_attempt(job("a", 1.0), Site("s"), random.Random(0), faulty=True)
    assert injected.kind is OutcomeKind.PERMANENT


def test_transient_fraction_matches_binomial():
    n, p = 100_000, 0.5
    site = Site("s", 1, 1.0, FailureModel(p_transient=p))
    rng = random.Random(1234)
    fails = sum(execute_attempt(job("a", 1.0), site, rng).kind is OutcomeKind.TRANSIENT for _ in range(n))
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(fails - n * p) <= 3 * sigma


def test_failed_attempt_burns_partial_duration():
    site = Site("s", 1, 2.0, FailureModel(p_transient=0.999999))
    durations = [execute_attempt(job("a", 10.0), site, random.Random(k)).duration for k in range(500)]
    assert all(0 < d <= 5.0 for d in durations)
    fixed = Site("s", 1, 2.0, FailureModel(p_transient=0.999999, failure_point=1.0))
    assert execute_attempt(job("a", 10.0), fixed, random.Random(0)).duration == 5.0


def test_silent_corruption_rate():
    p, events = 1e-3, 2_000_000
    site = Site("s", 1, 1.0, FailureModel(p_silent_per_event=p))
    out = execute_attempt(job("a", 1.0, first=0, count=events), site, random.Random(7))
    assert all(0 <= e < events for e in out.corrupted_events)
    assert len(set(out.corrupted_events)) == len(out.corrupted_events)
    sigma = math.sqrt(events * p * (1 - p))
    assert abs(len(out.corrupted_events) - events * p) <= 3 * sigma


def test_job_rng_streams_are_stable_and_distinct():
    assert job_rng(1, "x", 1).random() == job_rng(1, "x", 1).random()
    assert job_rng(1, "x", 1).random() != job_rng(1, "x", 2).random()
    assert job_rng(1, "x", 1).random() != job_rng(2, "x", 1).random()


# -- engine ------------------------------------------------------------------


def one_task_workflow(events=10, tolerate=False, max_attempts=3):
    spec = TransformationSpec("Reco_tf", parse_data_type("RAW"), (parse_data_type("ESD"),), 1.0)
    tmpl = WorkflowTemplate("single", (TemplateStep("reco", spec, inputs=("$input",)),))
    req = Request("w", "single", {"input": "ext.RAW", "input_events": str(events)})
    return compile_request(req, {"single": tmpl}, RetryPolicy(max_attempts, tolerate_loss=tolerate))


def test_minimal_run_single_success():
    wf = one_task_workflow(events=10)
    log = run(wf, [Site("s", 1, 1.0, min_job_events=10, max_job_events=10)], seed=1)
    assert log.state is WorkflowState.DONE
    assert [a.outcome for a in log.attempts] == [OutcomeKind.SUCCESS]
    assert log.tasks[0].state is TaskState.DONE
    assert wf.tasks["w.reco"].state is TaskState.REGISTERED  # caller's workflow untouched


def test_run_is_deterministic(reco_workflow, flaky_sites):
    a = run(reco_workflow, flaky_sites, seed=5)
    b = run(reco_workflow, flaky_sites, seed=5)
    assert a == b
    assert a.to_jsonl() == b.to_jsonl()
    assert run(reco_workflow, flaky_sites, seed=6).to_jsonl() != a.to_jsonl()


def test_runlog_jsonl_roundtrip(reco_workflow, flaky_sites):
    log = run(reco_workflow, flaky_sites, seed=3)
    again = RunLog.from_jsonl(log.to_jsonl())
    assert again == log
    assert again.to_jsonl() == log.to_jsonl()


def test_horizon_guard(reco_workflow, flaky_sites):
    with pytest.raises(HorizonExceeded):
        run(reco_workflow, flaky_sites, seed=1, config=EngineConfig(horizon=10.0))


def test_invalid_workflow_rejected(reco_workflow, clean_site):
    wf = reco_workflow
    wf.tasks["r1.merge"] = replace(wf.tasks["r1.merge"], outputs=("r1.recon.ESD",))
    with pytest.raises(InvalidWorkflow):
        run(wf, [clean_site], seed=1)


def test_injected_faults_fail_strict_workflow():
    wf = one_task_workflow(events=5000, max_attempts=14)
    wf.tasks["w.reco"] = replace(wf.tasks["w.reco"], retry_policy=RetryPolicy(14, split_on_retry=True))
    sites = [Site("s", 50, 1.0, FailureModel(p_transient=0.05), max_job_events=300)]
    cfg = EngineConfig(faults=(Fault("reco", 42), Fault("reco", 4321)))
    log = run(wf, sites, seed=9, config=cfg)
    assert log.state is WorkflowState.FAILED
    assert sorted((l.first, l.count) for l in log.losses) == [(42, 1), (4321, 1)]
    assert log.tasks[0].state is TaskState.FAILED


def test_tolerant_task_accepts_losses_and_finishes():
    wf = one_task_workflow(events=2000, tolerate=True, max_attempts=1)
    sites = [Site("s", 20, 1.0, FailureModel(p_transient=0.3), max_job_events=10)]
    log = run(wf, sites, seed=2, config=EngineConfig(scouts=ScoutConfig(5, 1)))
    assert log.state is WorkflowState.DONE
    assert log.losses and all(l.reason == "accepted" for l in log.losses)
    t = log.tasks[0]
    assert t.events_ok + t.events_lost == t.events_in == 2000
    assert t.events_out == t.events_ok


def _check_invariants(log: RunLog, sites):
    cores = {s.id: s.cores for s in sites}
    running = defaultdict(int)
    started = {}
    complete_at = {}
    first_start = {}
    for e in log.events:
        p = e.payload
        if e.kind is EventKind.DATASET_COMPLETE:
            complete_at[p["dataset"]] = e.seq
        elif e.kind is EventKind.JOB_START:
            running[p["site"]] += 1
            assert running[p["site"]] <= cores[p["site"]]
            started[p["job"]] = e.seq
            first_start.setdefault(p["task"], e.seq)
        elif e.kind is EventKind.JOB_END:
            running[p["site"]] -= 1
            assert started[p["job"]] < e.seq
    seqs = [(e.time, e.seq) for e in log.events]
    assert seqs == sorted(seqs) and len({s for _, s in seqs}) == len(seqs)
    return first_start, complete_at


@pytest.mark.parametrize("seed", range(5))
def test_engine_invariants_on_mc_chain(seed, registry):
    req = Request("m", "mc-chain", {"hs": "hs.EVNT", "hs_events": "3000", "mb": "mb.EVNT", "mb_events": "3000"})
    wf = compile_request(req, registry, RetryPolicy(2, tolerate_loss=True))
    sites = [
        Site("a", 16, 1.0, FailureModel(p_transient=0.2), max_job_events=200),
        Site("b", 8, 0.5, FailureModel(p_transient=0.1), max_job_events=50),
    ]
    log = run(wf, sites, seed)
    first_start, complete_at = _check_invariants(log, sites)
    for t in wf.tasks.values():
        if t.id in first_start:
            for name in t.inputs:
                assert complete_at[name] < first_start[t.id]
    for rec in log.tasks:
        assert rec.events_ok + rec.events_lost == rec.events_in
        assert rec.state.terminal
