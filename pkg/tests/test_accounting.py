import math
from dataclasses import replace

import pytest

from prodsys.accounting import (
    COLUMNS,
    IncompleteLog,
    LabelMismatch,
    Report,
    campaign_report,
    compute_metrics,
)
from prodsys.deft import TaskState, WorkflowState
from prodsys.gridsim import (
    AttemptRecord,
    EventKind,
    FailureModel,
    LossRecord,
    RunLog,
    SimEvent,
    Site,
    TaskRecord,
    run,
)
from prodsys.jedi import OutcomeKind


def synthetic_log(events_in=900_000, losses=(), attempts=None, state=WorkflowState.DONE, tasks_state=TaskState.DONE):
    lost = sum(c for _, c in losses)
    attempts = attempts if attempts is not None else (
        AttemptRecord("j0", "t", "s", 1, 0.0, 100.0, OutcomeKind.SUCCESS, 0, events_in),
    )
    return RunLog(
        seed=1,
        workflow="w",
        state=state,
        end_time=100.0,
        events=(SimEvent(0.0, 0, EventKind.JOB_START, {"job": "j0", "task": "t", "site": "s"}),),
        attempts=tuple(attempts),
        losses=tuple(LossRecord("t", f, c, "exhausted") for f, c in losses),
        corruptions=(),
        tasks=(TaskRecord("t", "reco", tasks_state, events_in, events_in - lost, lost, events_in - lost, 1, False, 0.0),),
    )


def test_failure_free_run_has_no_overhead(reco_workflow, clean_site):
    m = compute_metrics(run(reco_workflow, [clean_site], seed=1))
    assert m.cpu_overhead == 0.0 and m.wasted_cpu == 0.0
    assert m.events_lost == 0 and m.loss_fraction == 0.0
    assert m.failed_attempts == 0 and m.total_cpu > 0


def test_two_lost_events_loss_fraction():
    m = compute_metrics(synthetic_log(900_000, losses=((17, 1), (512_000, 1))))
    assert m.events_lost == 2
    assert math.isclose(m.loss_fraction, 2 / 900_000)
    assert math.isclose(m.loss_fraction, 2.2e-6, rel_tol=0.01)


def test_overhead_is_wasted_over_total():
    attempts = [
        AttemptRecord("j0", "t", "s", 1, 0.0, 30.0, OutcomeKind.TRANSIENT, 0, 10),
        AttemptRecord("j0.r", "t", "s", 2, 30.0, 70.0, OutcomeKind.SUCCESS, 0, 10),
    ]
    m = compute_metrics(synthetic_log(10, attempts=attempts))
    assert m.total_cpu == 100.0 and m.wasted_cpu == 30.0
    assert m.cpu_overhead == pytest.approx(0.3)
    assert (m.attempts, m.failed_attempts) == (2, 1)


def test_metrics_on_flaky_run_are_consistent(reco_workflow, flaky_sites):
    log = run(reco_workflow, flaky_sites, seed=4)
    m = compute_metrics(log)
    assert 0 < m.cpu_overhead < 1
    assert m.total_cpu == pytest.approx(sum(a.duration for a in log.attempts))
    assert m.failed_attempts == sum(a.outcome is not OutcomeKind.SUCCESS for a in log.attempts)
    assert compute_metrics(log) == m


def test_incomplete_log_rejected():
    with pytest.raises(IncompleteLog):
        compute_metrics(synthetic_log(state=WorkflowState.ACTIVE))
    with pytest.raises(IncompleteLog):
        compute_metrics(synthetic_log(tasks_state=TaskState.RUNNING))


def test_over_budget_flag():
    log = synthetic_log(1000, losses=((0, 5),))
    log = replace(log, tasks=(replace(log.tasks[0], tolerate_loss=True, loss_budget=1e-3),))
    assert compute_metrics(log).per_task[0].over_budget


def test_campaign_report_four_years():
    labels = ["2010", "2011", "2012", "2013"]
    logs = [synthetic_log(1000 * (i + 1), losses=((0, i),) if i else ()) for i in range(4)]
    rep = campaign_report(logs, labels)
    assert [r.campaign for r in rep.rows] == labels
    assert [r.events_not_processed for r in rep.rows] == [0, 1, 2, 3]
    assert all(r.events_processed + r.events_not_processed == r.input_events for r in rep.rows)
    text = rep.to_text().splitlines()
    assert len(text) == 2 + 4
    assert text[0].startswith("Campaign")
    assert all(title in text[0] for _, title in COLUMNS)
    assert Report.from_json(rep.to_json()) == rep


def test_empty_report_is_header_only():
    rep = campaign_report([], [])
    assert len(rep.to_text().splitlines()) == 2
    assert rep.to_dict()["rows"] == []


def test_label_mismatch():
    log = synthetic_log()
    with pytest.raises(LabelMismatch):
        campaign_report([log, log], ["2012", "2012"])
    with pytest.raises(LabelMismatch):
        campaign_report([log], ["a", "b"])


def test_silent_corruption_counted(reco_workflow):
    site = Site("A", 4, 1.0, FailureModel(p_silent_per_event=0.01))
    log = run(reco_workflow, [site], seed=2)
    m = compute_metrics(log)
    assert m.silent_corruptions == len(log.corruptions) > 0
    assert m.events_lost == 0
