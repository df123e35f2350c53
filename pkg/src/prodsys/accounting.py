"""Metrics and campaign reports derived from run logs.

Everything here is a pure aggregation over a :class:`~prodsys.gridsim.RunLog`;
recomputing from the same log always gives the same numbers.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

from .deft import WorkflowState
from .gridsim import EventKind, RunLog
from .jedi import OutcomeKind

__all__ = ["Metrics", "TaskMetrics", "Report", "ReportRow", "IncompleteLog", "LabelMismatch", "compute_metrics", "campaign_report"]


class IncompleteLog(ValueError):
    pass


class LabelMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TaskMetrics:
    task: str
    state: str
    events_in: int
    events_ok: int
    events_lost: int
    loss_fraction: float
    total_cpu: float
    wasted_cpu: float
    attempts: int
    over_budget: bool


@dataclass(frozen=True)
class Metrics:
    total_cpu: float
    wasted_cpu: float
    cpu_overhead: float
    events_in: int
    events_lost: int
    loss_fraction: float
    silent_corruptions: int
    makespan: float
    attempts: int
    failed_attempts: int
    per_task: Tuple[TaskMetrics, ...]


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_metrics(log: RunLog) -> Metrics:
    """Aggregate CPU, loss and corruption figures from ``log``.

    ``events_in`` and ``events_lost`` are summed over tasks, so the loss
    fraction is the share of task-level event processing that was lost.
    Wasted CPU counts every attempt that did not succeed.
    """
    if log.state not in (WorkflowState.DONE, WorkflowState.FAILED):
        raise IncompleteLog(f"workflow {log.workflow} is {log.state.value}")
    if any(not t.state.terminal for t in log.tasks):
        raise IncompleteLog(f"workflow {log.workflow} has non-terminal tasks")

    cpu: Dict[str, float] = defaultdict(float)
    wasted: Dict[str, float] = defaultdict(float)
    failed = 0
    for a in log.attempts:
        cpu[a.task] += a.duration
        if a.outcome is not OutcomeKind.SUCCESS:
            wasted[a.task] += a.duration
            failed += 1
    lost: Dict[str, int] = defaultdict(int)
    for l in log.losses:
        lost[l.task] += l.count

    per_task = []
    for t in log.tasks:
        frac = _ratio(lost[t.task], t.events_in)
        per_task.append(TaskMetrics(
            task=t.task,
            state=t.state.value,
            events_in=t.events_in,
            events_ok=t.events_ok,
            events_lost=lost[t.task],
            loss_fraction=frac,
            total_cpu=cpu[t.task],
            wasted_cpu=wasted[t.task],
            attempts=t.attempts,
            over_budget=t.tolerate_loss and frac > t.loss_budget,
        ))

    total_cpu = sum(a.duration for a in log.attempts)
    wasted_cpu = sum(wasted.values())
    events_in = sum(t.events_in for t in log.tasks)
    events_lost = sum(lost.values())
    starts = [e.time for e in log.events if e.kind is EventKind.JOB_START]
    makespan = log.end_time - min(starts) if starts else 0.0
    return Metrics(
        total_cpu=total_cpu,
        wasted_cpu=wasted_cpu,
        cpu_overhead=_ratio(wasted_cpu, total_cpu),
        events_in=events_in,
        events_lost=events_lost,
        loss_fraction=_ratio(events_lost, events_in),
        silent_corruptions=len(log.corruptions),
        makespan=makespan,
        attempts=len(log.attempts),
        failed_attempts=failed,
        per_task=tuple(per_task),
    )


COLUMNS = (
    ("campaign", "Campaign"),
    ("input_events", "Input Events"),
    ("cpu_hours", "CPU Used (h)"),
    ("events_processed", "Events Processed"),
    ("events_not_processed", "Events not Processed"),
    ("silent_corruptions", "Silent Corruption (events)"),
    ("scale_factor", "Scale"),
)


@dataclass(frozen=True)
class ReportRow:
    campaign: str
    input_events: int
    cpu_hours: float
    events_processed: int
    events_not_processed: int
    silent_corruptions: int
    scale_factor: float
    state: str


@dataclass(frozen=True)
class Report:
    rows: Tuple[ReportRow, ...]

    def to_dict(self) -> dict:
        return {"columns": [c for c, _ in COLUMNS] + ["state"], "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls(tuple(ReportRow(**r) for r in json.loads(text)["rows"]))

    def to_text(self) -> str:
        header = [title for _, title in COLUMNS]
        body: List[List[str]] = []
        for r in self.rows:
            body.append([
                r.campaign,
                f"{r.input_events:d}",
                f"{r.cpu_hours:.1f}",
                f"{r.events_processed:d}",
                f"{r.events_not_processed:d}",
                f"{r.silent_corruptions:d}",
                f"{r.scale_factor:g}",
            ])
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

        def fmt(row: List[str]) -> str:
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            return "  ".join(cells).rstrip()

        lines = [fmt(header), "  ".join("-" * w for w in widths)]
        lines.extend(fmt(r) for r in body)
        return "\n".join(lines) + "\n"


def campaign_report(logs: Sequence[RunLog], labels: Sequence[str]) -> Report:
    """One row per campaign, shaped like the yearly processing tables.

    Counts are raw desk-scale values; the ``scale_factor`` column carries the
    multiplier back to production magnitudes.
    """
    if len(labels) != len(logs):
        raise LabelMismatch(f"{len(logs)} logs but {len(labels)} labels")
    if len(set(labels)) != len(labels):
        dupes = sorted({l for l in labels if list(labels).count(l) > 1})
        raise LabelMismatch(f"duplicate labels: {dupes}")
    rows = []
    for label, log in zip(labels, logs):
        m = compute_metrics(log)
        rows.append(ReportRow(
            campaign=label,
            input_events=m.events_in,
            cpu_hours=m.total_cpu / 3600.0,
            events_processed=m.events_in - m.events_lost,
            events_not_processed=m.events_lost,
            silent_corruptions=m.silent_corruptions,
            scale_factor=log.scale_factor,
            state=log.state.value,
        ))
    return Report(tuple(rows))
