"""Deterministic discrete-event simulation of a heterogeneous grid.

:func:`run` drives a compiled workflow to a terminal state on a list of
simulated sites and returns an immutable :class:`RunLog`. A run is a pure
function of ``(workflow, sites, seed, config)``. Every attempt draws from its
own random stream, keyed by a stable hash of ``(seed, job id, attempt)``, so
adding or reordering jobs never perturbs the draws of unrelated jobs.
"""

from __future__ import annotations

import bisect
import hashlib
import heapq
import io
import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from . import protocol
from .datamodel import Dataset, DatasetStatus, EventRange, TransformKind
from .deft import (
    Task,
    TaskState,
    TransitionEvent,
    Workflow,
    WorkflowState,
    apply_transition,
    ready_tasks,
    validate_workflow,
)
from .jedi import (
    AcceptLoss,
    ExhaustedRetries,
    JobDefinition,
    Outcome,
    OutcomeKind,
    RetryPolicy,
    ScoutConfig,
    ScoutVerdict,
    SiteSnapshot,
    SplitContext,
    SubRegionSplitSpec,
    evaluate_scouts,
    events_per_job,
    get_splitter,
    pick_scouts,
    redefine_failed,
)

__all__ = [
    "FailureModel",
    "Site",
    "Fault",
    "EngineConfig",
    "EventKind",
    "SimEvent",
    "AttemptRecord",
    "LossRecord",
    "CorruptionRecord",
    "TaskRecord",
    "RunLog",
    "Assignment",
    "HorizonExceeded",
    "InvalidWorkflow",
    "broker_assign",
    "execute_attempt",
    "job_rng",
    "run",
]


class HorizonExceeded(RuntimeError):
    pass


class InvalidWorkflow(ValueError):
    pass


@dataclass(frozen=True)
class FailureModel:
    """Per-attempt failure probabilities for one site.

    ``failure_point`` fixes the fraction of the nominal duration a failed
    attempt runs before dying; ``None`` draws it uniformly from (0, 1].
    """

    p_transient: float = 0.0
    p_permanent: float = 0.0
    p_silent_per_event: float = 0.0
    failure_point: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("p_transient", "p_permanent", "p_silent_per_event"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        if self.p_transient + self.p_permanent > 1:
            raise ValueError("p_transient + p_permanent must be <= 1")
        if self.failure_point is not None and not 0 < self.failure_point <= 1:
            raise ValueError("failure_point must be in (0, 1]")


@dataclass(frozen=True)
class Site:
    id: str
    cores: int = 1
    speed_factor: float = 1.0
    failure: FailureModel = FailureModel()
    max_walltime: float = math.inf
    min_job_events: int = 1
    max_job_events: int = 1_000_000_000

    def __post_init__(self) -> None:
        if self.cores < 1:
            raise ValueError(f"site {self.id}: cores must be >= 1")
        if not self.speed_factor > 0:
            raise ValueError(f"site {self.id}: speed_factor must be > 0")
        if not 1 <= self.min_job_events <= self.max_job_events:
            raise ValueError(f"site {self.id}: need 1 <= min_job_events <= max_job_events")

    def snapshot(self, free_cores: Optional[int] = None) -> SiteSnapshot:
        return SiteSnapshot(
            site_id=self.id,
            speed_factor=self.speed_factor,
            free_cores=self.cores if free_cores is None else free_cores,
            max_walltime=self.max_walltime,
            min_job_events=self.min_job_events,
            max_job_events=self.max_job_events,
        )


@dataclass(frozen=True)
class Fault:
    """A permanently failing input event: any job whose range holds it fails."""

    step: str
    event: int


@dataclass(frozen=True)
class EngineConfig:
    target_walltime: float = 3600.0
    horizon: float = 1e9
    scouts: ScoutConfig = ScoutConfig()
    subregion_spec: SubRegionSplitSpec = SubRegionSplitSpec()
    batch_events: int = 100
    merge_events: int = 20_000
    faults: Tuple[Fault, ...] = ()
    scale_factor: float = 1.0


class EventKind(str, Enum):
    JOB_START = "JobStart"
    JOB_END = "JobEnd"
    DATASET_COMPLETE = "DatasetComplete"
    TASK_TRANSITION = "TaskTransition"
    SCOUT_VERDICT = "ScoutVerdict"


@dataclass(frozen=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind
    payload: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class AttemptRecord:
    job: str
    task: str
    site: str
    attempt: int
    start: float
    duration: float
    outcome: OutcomeKind
    first: int
    count: int
    scout: bool = False


@dataclass(frozen=True)
class LossRecord:
    task: str
    first: int
    count: int
    reason: str


@dataclass(frozen=True)
class CorruptionRecord:
    dataset: str
    event: int


@dataclass(frozen=True)
class TaskRecord:
    task: str
    step: str
    state: TaskState
    events_in: int
    events_ok: int
    events_lost: int
    events_out: int
    attempts: int
    tolerate_loss: bool
    loss_budget: float


@dataclass(frozen=True)
class RunLog:
    seed: int
    workflow: str
    state: WorkflowState
    end_time: float
    events: Tuple[SimEvent, ...]
    attempts: Tuple[AttemptRecord, ...]
    losses: Tuple[LossRecord, ...]
    corruptions: Tuple[CorruptionRecord, ...]
    tasks: Tuple[TaskRecord, ...]
    scale_factor: float = 1.0

    SCHEMA = 1

    def to_jsonl(self) -> str:
        """Line-delimited JSON, one record per line, byte-stable across runs."""
        buf = io.StringIO()

        def emit(obj: dict) -> None:
            buf.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
            buf.write("\n")

        emit({
            "record": "header",
            "schema": self.SCHEMA,
            "seed": self.seed,
            "workflow": self.workflow,
            "state": self.state.value,
            "end_time": self.end_time,
            "scale_factor": self.scale_factor,
        })
        for e in self.events:
            emit({"record": "event", "time": e.time, "seq": e.seq, "kind": e.kind.value, "payload": dict(e.payload)})
        for a in self.attempts:
            emit({
                "record": "attempt", "job": a.job, "task": a.task, "site": a.site, "attempt": a.attempt,
                "start": a.start, "duration": a.duration, "outcome": a.outcome.value,
                "first": a.first, "count": a.count, "scout": a.scout,
            })
        for l in self.losses:
            emit({"record": "loss", "task": l.task, "first": l.first, "count": l.count, "reason": l.reason})
        for c in self.corruptions:
            emit({"record": "corruption", "dataset": c.dataset, "event": c.event})
        for t in self.tasks:
            emit({
                "record": "task", "task": t.task, "step": t.step, "state": t.state.value,
                "events_in": t.events_in, "events_ok": t.events_ok, "events_lost": t.events_lost,
                "events_out": t.events_out, "attempts": t.attempts,
                "tolerate_loss": t.tolerate_loss, "loss_budget": t.loss_budget,
            })
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        header = None
        events, attempts, losses, corruptions, tasks = [], [], [], [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("record")
            if kind == "header":
                header = rec
            elif kind == "event":
                events.append(SimEvent(rec["time"], rec["seq"], EventKind(rec["kind"]), rec["payload"]))
            elif kind == "attempt":
                rec["outcome"] = OutcomeKind(rec["outcome"])
                attempts.append(AttemptRecord(**rec))
            elif kind == "loss":
                losses.append(LossRecord(**rec))
            elif kind == "corruption":
                corruptions.append(CorruptionRecord(**rec))
            elif kind == "task":
                rec["state"] = TaskState(rec["state"])
                tasks.append(TaskRecord(**rec))
            else:
                raise ValueError(f"line {lineno}: unknown record type {kind!r}")
        if header is None:
            raise ValueError("run log has no header record")
        if header.get("schema") != cls.SCHEMA:
            raise ValueError(f"unsupported run log schema {header.get('schema')!r}")
        return cls(
            seed=header["seed"],
            workflow=header["workflow"],
            state=WorkflowState(header["state"]),
            end_time=header["end_time"],
            scale_factor=header["scale_factor"],
            events=tuple(events),
            attempts=tuple(attempts),
            losses=tuple(losses),
            corruptions=tuple(corruptions),
            tasks=tuple(tasks),
        )


# -- broker ------------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    job: JobDefinition
    site: str
    start: float
    est_end: float


def broker_assign(
    ready: Sequence[JobDefinition],
    sites: Sequence[Site],
    now: float = 0.0,
    core_free: Optional[Mapping[str, Sequence[float]]] = None,
    *,
    only_now: bool = False,
) -> List[Assignment]:
    """Greedy earliest-estimated-completion assignment.

    Jobs are taken by descending ``est_cpu`` (stable on input order) and each
    goes to the core minimising ``available + est_cpu / speed``; ties prefer
    the earlier start, then site order. ``core_free`` gives each site's core
    availability times (default: every core free at ``now``).

    With ``only_now`` the plan stops once no core is free at ``now`` and only
    the assignments starting at ``now`` are returned; the rest stay queued.
    """
    if not sites:
        return []
    heaps: List[List[float]] = []
    for s in sites:
        times = core_free.get(s.id) if core_free is not None else None
        if times is None:
            times = [now] * s.cores
        h = [max(now, t) for t in times]
        heapq.heapify(h)
        heaps.append(h)
    free_now = sum(1 for h in heaps for t in h if t <= now)
    out: List[Assignment] = []
    for job in sorted(ready, key=lambda j: -j.est_cpu):
        if only_now and free_now == 0:
            break
        best = None
        for i, s in enumerate(sites):
            h = heaps[i]
            if not h:
                continue
            start = h[0]
            end = start + job.est_cpu / s.speed_factor
            key = (end, start, i)
            if best is None or key < best:
                best = key
        if best is None:
            break
        end, start, i = best
        heapq.heapreplace(heaps[i], end)
        if start <= now:
            free_now -= 1
        if not only_now or start <= now:
            out.append(Assignment(job, sites[i].id, start, end))
    return out


# -- attempts ----------------------------------------------------------------


def job_rng(seed: int, job_id: str, attempt: int) -> random.Random:
    digest = hashlib.blake2b(f"{seed}\x1f{job_id}\x1f{attempt}".encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


def _silent_corruptions(rng: random.Random, rng_range: EventRange, p: float) -> Tuple[int, ...]:
    if p <= 0:
        return ()
    # geometric skipping: exact per-event Bernoulli(p) without touching every event
    out = []
    log_q = math.log1p(-p)
    i = rng_range.first - 1
    while True:
        i += 1 + int(math.log(1.0 - rng.random()) / log_q)
        if i >= rng_range.stop:
            return tuple(out)
        out.append(i)


def execute_attempt(job: JobDefinition, site: Site, rng: random.Random, *, faulty: bool = False) -> Outcome:
    """Run one attempt of ``job`` on ``site``.

    A single uniform draw picks the branch in the order permanent, transient,
    success. Failed attempts burn a fraction of the nominal duration. An
    injected fault (``faulty``) forces the permanent branch.
    """
    fm = site.failure
    nominal = job.est_cpu / site.speed_factor
    u = rng.random()
    if faulty or u < fm.p_permanent:
        kind = OutcomeKind.PERMANENT
    elif u < fm.p_permanent + fm.p_transient:
        kind = OutcomeKind.TRANSIENT
    else:
        corrupted = _silent_corruptions(rng, job.input_range, fm.p_silent_per_event)
        return Outcome(OutcomeKind.SUCCESS, nominal, corrupted)
    frac = fm.failure_point if fm.failure_point is not None else 1.0 - rng.random()
    return Outcome(kind, nominal * frac)


# -- engine ------------------------------------------------------------------


class _TaskRun:
    """Runtime bookkeeping for one activated task."""

    def __init__(self, task: Task, events: int, policy: RetryPolicy, late: bool, slices: int):
        self.task = task
        self.events = events
        self.policy = policy
        self.late = late
        self.slices = slices
        self.pool_next = 0
        self.queued: List[Tuple[float, int, JobDefinition]] = []
        self.held: List[JobDefinition] = []
        self.running = 0
        self.scouts: Dict[str, Optional[Outcome]] = {}
        self.verdict: Optional[ScoutVerdict] = None
        self.unit_done: Dict[int, int] = defaultdict(int)
        self.unit_lost: Dict[int, bool] = {}
        self.ok: List[EventRange] = []
        self.lost_events = 0
        self.unrecoverable = False
        self.attempts = 0
        self.id_counter = 0

    @property
    def pool_left(self) -> int:
        return self.events - self.pool_next if self.late else 0

    @property
    def outstanding(self) -> bool:
        return bool(self.pool_left or self.queued or self.held or self.running)


class _Engine:
    def __init__(self, wf: Workflow, sites: Sequence[Site], seed: int, cfg: EngineConfig):
        self.wf = Workflow(wf.id, dict(wf.tasks), dict(wf.datasets), dict(wf.external), WorkflowState.ACTIVE)
        self.sites = list(sites)
        self.site_by_id = {s.id: s for s in self.sites}
        self.seed = seed
        self.cfg = cfg
        self.now = 0.0
        self.seq = 0
        self.heap: List[Tuple[float, int, str, JobDefinition, Outcome]] = []
        self.events: List[SimEvent] = []
        self.attempts: List[AttemptRecord] = []
        self.losses: List[LossRecord] = []
        self.corruptions: List[CorruptionRecord] = []
        self.runs: Dict[str, _TaskRun] = {}
        self.running_est: Dict[str, Dict[str, float]] = {s.id: {} for s in self.sites}
        self.queue_seq = 0
        self.faults: Dict[str, List[int]] = defaultdict(list)
        step_to_task = {t.step: t.id for t in self.wf.tasks.values()}
        for f in cfg.faults:
            if f.step not in step_to_task:
                raise InvalidWorkflow(f"fault injected into unknown step {f.step!r}")
            self.faults[step_to_task[f.step]].append(f.event)
        for v in self.faults.values():
            v.sort()
        self.reference = SiteSnapshot(
            site_id="reference",
            speed_factor=1.0,
            min_job_events=min(s.min_job_events for s in self.sites),
            max_job_events=min(s.max_job_events for s in self.sites),
        )

    # logging

    def log(self, kind: EventKind, **payload) -> None:
        self.events.append(SimEvent(self.now, self.seq, kind, payload))
        self.seq += 1

    def transition(self, tid: str, event: TransitionEvent) -> Task:
        old = self.wf.tasks[tid]
        new = apply_transition(old, event)
        self.wf.tasks[tid] = new
        if tid in self.runs:
            self.runs[tid].task = new
        self.log(EventKind.TASK_TRANSITION, task=tid, event=event.value, **{"from": old.state.value, "to": new.state.value})
        msg = protocol.task_status(tid, new.state.value, self.now)
        protocol.decode(protocol.encode(msg))
        return new

    # task lifecycle

    def activate(self, tid: str) -> None:
        task = self.wf.tasks[tid]
        wire = protocol.encode(protocol.task_activate(task, self.now))
        task_msg = protocol.decode(wire)
        plugin = get_splitter(task_msg.body["splitter"])
        events = self.wf.dataset(task.input).total_events
        policy = task.retry_policy
        if not plugin.split_on_retry and policy.split_on_retry:
            policy = replace(policy, split_on_retry=False)
        slices = 1
        if plugin.name == "subregion":
            slices = self.cfg.subregion_spec.jobs_per_batch
        elif plugin.name == "region-merge":
            slices = self.cfg.subregion_spec.regions
        run = _TaskRun(task, events, policy, plugin.late_binding, slices)
        self.runs[tid] = run
        ctx = SplitContext(
            events=events,
            site=self._snapshot_for(task, self.reference),
            target_walltime=self.cfg.target_walltime,
            subregion_spec=self.cfg.subregion_spec,
            batch_events=self.cfg.batch_events,
        )
        jobs = plugin.define(task, ctx)
        scouts, held = pick_scouts(jobs, self.cfg.scouts)
        if plugin.late_binding:
            # held event ranges go back to the pool and get sized per site later
            run.pool_next = scouts[-1].input_range.stop
            run.id_counter = len(scouts)
        else:
            run.held = held
            run.id_counter = len(jobs)
        self.transition(tid, TransitionEvent.JOBS_DEFINED)
        for job in scouts:
            run.scouts[job.id] = None
            self.enqueue(run, job)
        self.transition(tid, TransitionEvent.SCOUTS_LAUNCHED)

    def _snapshot_for(self, task: Task, snap: SiteSnapshot) -> SiteSnapshot:
        if task.transformation.kind is TransformKind.MERGE:
            return replace(snap, min_job_events=1, max_job_events=self.cfg.merge_events)
        return snap

    def enqueue(self, run: _TaskRun, job: JobDefinition) -> None:
        bisect.insort(run.queued, (-job.est_cpu, self.queue_seq, job))
        self.queue_seq += 1

    def finish_scouting(self, run: _TaskRun) -> None:
        tid = run.task.id
        verdict = evaluate_scouts(list(run.scouts.values()), self.cfg.scouts)
        run.verdict = verdict
        self.log(EventKind.SCOUT_VERDICT, task=tid, verdict=verdict.value,
                 successes=sum(1 for o in run.scouts.values() if o.ok), scouts=len(run.scouts))
        if verdict is ScoutVerdict.PROCEED:
            self.transition(tid, TransitionEvent.SCOUTS_OK)
            for job in run.held:
                self.enqueue(run, job)
            run.held = []
        else:
            run.held = []
            run.queued = []
            run.pool_next = run.events if run.late else run.pool_next
            self.record_complement_loss(run, "broken")
            self.transition(tid, TransitionEvent.SCOUTS_FAILED)
            self.close_outputs(run.task, ok=False)

    def record_complement_loss(self, run: _TaskRun, reason: str) -> None:
        """Everything not already succeeded or lost is lost with ``reason``."""
        accounted = sorted(run.ok + [EventRange(f, c) for f, c in self._lost_ranges(run.task.id)])
        cursor = 0
        for r in accounted:
            if r.first > cursor:
                self.add_loss(run, EventRange(cursor, r.first - cursor), reason)
            cursor = max(cursor, r.stop)
        if cursor < run.events:
            self.add_loss(run, EventRange(cursor, run.events - cursor), reason)

    def _lost_ranges(self, tid: str) -> List[Tuple[int, int]]:
        return [(l.first, l.count) for l in self.losses if l.task == tid]

    def add_loss(self, run: _TaskRun, rng: EventRange, reason: str) -> None:
        self.losses.append(LossRecord(run.task.id, rng.first, rng.count, reason))
        run.lost_events += rng.count

    def maybe_complete(self, run: _TaskRun) -> None:
        task = run.task
        if task.state is not TaskState.RUNNING or run.outstanding:
            return
        if run.unrecoverable:
            self.transition(task.id, TransitionEvent.UNRECOVERABLE_LOSS)
            self.close_outputs(self.wf.tasks[task.id], ok=False)
            return
        self.transition(task.id, TransitionEvent.ALL_JOBS_DONE)
        self.close_outputs(self.wf.tasks[task.id], ok=True)
        self.transition(task.id, TransitionEvent.OUTPUTS_REGISTERED)

    def close_outputs(self, task: Task, ok: bool) -> None:
        run = self.runs[task.id]
        n_out = sum(task.transformation.selected(r) for r in run.ok) if ok else 0
        for name in task.outputs:
            ds = self.wf.datasets[name]
            if ok and n_out > 0:
                self.wf.datasets[name] = Dataset.complete(name, ds.dtype, n_out)
                self.log(EventKind.DATASET_COMPLETE, dataset=name, events=n_out)
            else:
                self.wf.datasets[name] = replace(ds, status=DatasetStatus.FAILED)

    def schedule_tasks(self) -> None:
        changed = True
        while changed:
            changed = False
            for tid in ready_tasks(self.wf):
                self.activate(tid)
                changed = True
            for t in list(self.wf.tasks.values()):
                if t.state is TaskState.REGISTERED and any(
                    self.wf.dataset(n).status is DatasetStatus.FAILED for n in t.inputs
                ):
                    self.transition(t.id, TransitionEvent.ABORT)
                    for name in t.outputs:
                        self.wf.datasets[name] = replace(self.wf.datasets[name], status=DatasetStatus.FAILED)
                    changed = True

    # dispatch

    def free_cores(self, site: Site) -> int:
        return site.cores - len(self.running_est[site.id])

    def start(self, run: _TaskRun, job: JobDefinition, site: Site) -> None:
        faulty = False
        flist = self.faults.get(job.task_id)
        if flist:
            i = bisect.bisect_left(flist, job.input_range.first)
            faulty = i < len(flist) and flist[i] < job.input_range.stop
        outcome = execute_attempt(job, site, job_rng(self.seed, job.id, job.attempt), faulty=faulty)
        est_end = self.now + job.est_cpu / site.speed_factor
        self.running_est[site.id][job.id] = est_end
        run.running += 1
        self.log(EventKind.JOB_START, job=job.id, task=job.task_id, site=site.id, attempt=job.attempt,
                 scout=job.is_scout)
        heapq.heappush(self.heap, (self.now + outcome.duration, self.seq, site.id, job, outcome))

    def dispatch(self) -> None:
        active = [r for r in self.runs.values() if r.task.state in (TaskState.SCOUTING, TaskState.RUNNING)]
        queue = [entry for r in active for entry in r.queued]
        if queue:
            queue.sort(key=lambda e: (e[0], e[1]))
            core_free = {
                s.id: [self.now] * self.free_cores(s) + sorted(self.running_est[s.id].values())
                for s in self.sites
            }
            plan = broker_assign([e[2] for e in queue], self.sites, self.now, core_free, only_now=True)
            started = set()
            for a in plan:
                run = self.runs[a.job.task_id]
                self.start(run, replace(a.job, site=a.site), self.site_by_id[a.site])
                started.add(a.job.id)
            if started:
                for r in active:
                    r.queued = [e for e in r.queued if e[2].id not in started]
        for run in active:
            if run.task.state is not TaskState.RUNNING or not run.pool_left:
                continue
            c = run.task.transformation.cpu_per_event
            for site in self.sites:
                free = self.free_cores(site)
                if not free:
                    continue
                snap = self._snapshot_for(run.task, site.snapshot(free))
                walltime = min(self.cfg.target_walltime, site.max_walltime)
                size = events_per_job(c, snap, walltime)
                while free and run.pool_left:
                    n = min(size, run.pool_left)
                    job = JobDefinition(
                        id=f"{run.task.id}#{run.id_counter}",
                        task_id=run.task.id,
                        input_range=EventRange(run.pool_next, n),
                        est_cpu=n * c,
                        site=site.id,
                    )
                    run.id_counter += 1
                    run.pool_next += n
                    self.start(run, job, site)
                    free -= 1
                if not run.pool_left:
                    break

    # job completion

    def job_end(self, site_id: str, job: JobDefinition, outcome: Outcome) -> None:
        site = self.site_by_id[site_id]
        del self.running_est[site_id][job.id]
        run = self.runs[job.task_id]
        run.running -= 1
        run.attempts += 1
        start = self.now - outcome.duration
        self.attempts.append(AttemptRecord(
            job.id, job.task_id, site_id, job.attempt, start, outcome.duration, outcome.kind,
            job.input_range.first, job.input_range.count, job.is_scout,
        ))
        self.log(EventKind.JOB_END, job=job.id, task=job.task_id, site=site_id, outcome=outcome.kind.value)
        unit = job.input_range
        if outcome.ok:
            out_name = run.task.outputs[0]
            for ev in outcome.corrupted_events:
                self.corruptions.append(CorruptionRecord(out_name, ev))
            if run.slices == 1:
                run.ok.append(unit)
            else:
                run.unit_done[unit.first] += 1
                if run.unit_done[unit.first] == run.slices and not run.unit_lost.get(unit.first):
                    run.ok.append(unit)
        else:
            verdict = redefine_failed(job, run.policy, site.snapshot())
            if isinstance(verdict, list):
                for nj in verdict:
                    if run.task.state is TaskState.SCOUTING:
                        run.held.append(nj)
                    elif run.task.state is TaskState.RUNNING:
                        self.enqueue(run, nj)
            else:
                if isinstance(verdict, ExhaustedRetries):
                    run.unrecoverable = True
                reason = "accepted" if isinstance(verdict, AcceptLoss) else "exhausted"
                if run.slices == 1:
                    self.add_loss(run, verdict.range, reason)
                elif not run.unit_lost.get(unit.first):
                    run.unit_lost[unit.first] = True
                    if run.unit_done[unit.first] == run.slices:
                        run.ok.remove(unit)
                    self.add_loss(run, unit, reason)
        if job.is_scout and job.id in run.scouts and run.scouts[job.id] is None:
            run.scouts[job.id] = outcome
            if run.task.state is TaskState.SCOUTING and all(o is not None for o in run.scouts.values()):
                self.finish_scouting(run)
        self.maybe_complete(run)

    # main loop

    def terminal(self) -> bool:
        return all(t.state.terminal for t in self.wf.tasks.values())

    def run(self) -> RunLog:
        for name, ds in sorted(self.wf.external.items()):
            self.log(EventKind.DATASET_COMPLETE, dataset=name, events=ds.total_events)
        self.schedule_tasks()
        self.dispatch()
        while not self.terminal():
            if not self.heap:
                raise RuntimeError(f"simulation stalled at t={self.now} with non-terminal tasks")
            t = self.heap[0][0]
            if t > self.cfg.horizon:
                raise HorizonExceeded(f"simulated time {t} exceeds horizon {self.cfg.horizon}")
            self.now = t
            while self.heap and self.heap[0][0] == t:
                _, _, site_id, job, outcome = heapq.heappop(self.heap)
                self.job_end(site_id, job, outcome)
            self.schedule_tasks()
            self.dispatch()
        states = {t.state for t in self.wf.tasks.values()}
        self.wf.state = WorkflowState.DONE if states == {TaskState.DONE} else WorkflowState.FAILED
        return self.finish()

    def finish(self) -> RunLog:
        records = []
        for t in self.wf.tasks.values():
            run = self.runs.get(t.id)
            ok = sum(r.count for r in run.ok) if run else 0
            out = self.wf.datasets[t.outputs[0]].total_events
            records.append(TaskRecord(
                task=t.id,
                step=t.step,
                state=t.state,
                events_in=run.events if run else 0,
                events_ok=ok,
                events_lost=run.lost_events if run else 0,
                events_out=out,
                attempts=run.attempts if run else 0,
                tolerate_loss=t.retry_policy.tolerate_loss,
                loss_budget=t.retry_policy.loss_budget,
            ))
            self.wf.tasks[t.id] = replace(t, attempts_used=run.attempts if run else 0)
        return RunLog(
            seed=self.seed,
            workflow=self.wf.id,
            state=self.wf.state,
            end_time=self.now,
            events=tuple(self.events),
            attempts=tuple(self.attempts),
            losses=tuple(self.losses),
            corruptions=tuple(self.corruptions),
            tasks=tuple(records),
            scale_factor=self.cfg.scale_factor,
        )


def run(wf: Workflow, sites: Sequence[Site], seed: int, config: EngineConfig = EngineConfig()) -> RunLog:
    """Simulate ``wf`` on ``sites`` until every task is terminal.

    The caller's workflow is not modified. Raises :class:`HorizonExceeded`
    when the simulated clock passes ``config.horizon``.
    """
    diags = validate_workflow(wf)
    if diags:
        raise InvalidWorkflow("; ".join(str(d) for d in diags))
    if not sites:
        raise ValueError("need at least one site")
    return _Engine(wf, sites, seed, config).run()
