"""Dynamic job definition.

Splitter plugins turn a task into jobs once the task reaches execution and
the target site is known (late binding). This module also holds the scout
gate and the retry/redefinition rules that decide between a retry, an
accepted loss and an unrecoverable one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Callable, Dict, Optional, Sequence, Tuple, Union

from .datamodel import EventRange, TransformKind, partition_events

if TYPE_CHECKING:
    from .deft import Task

__all__ = [
    "RetryPolicy",
    "ScoutConfig",
    "SubRegionSplitSpec",
    "SiteSnapshot",
    "JobDefinition",
    "Outcome",
    "OutcomeKind",
    "ScoutVerdict",
    "AcceptLoss",
    "ExhaustedRetries",
    "MergePlan",
    "TaggedOutput",
    "SplitContext",
    "SplitterPlugin",
    "SPLITTERS",
    "events_per_job",
    "split_by_events",
    "split_subregions",
    "plan_merge",
    "pick_scouts",
    "evaluate_scouts",
    "redefine_failed",
    "expected_loss_fraction",
    "get_splitter",
]


class JediError(ValueError):
    pass


class EmptyInput(JediError):
    pass


class SpecInconsistent(JediError):
    pass


class CoverageGap(JediError):
    def __init__(self, missing: Sequence[int]):
        self.missing = tuple(missing)
        super().__init__(f"sub-regions not covered: {list(self.missing)}")


class DuplicateSubRegion(JediError):
    def __init__(self, duplicates: Sequence[int]):
        self.duplicates = tuple(duplicates)
        super().__init__(f"sub-regions covered more than once: {list(self.duplicates)}")


class NoJobs(JediError):
    pass


class IncompleteResults(JediError):
    pass


class UnsupportedPolicy(JediError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    tolerate_loss: bool = False
    loss_budget: float = 1e-8
    split_on_retry: bool = False

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not 0 <= self.loss_budget < 1:
            raise ValueError("loss_budget must be in [0, 1)")


@dataclass(frozen=True)
class ScoutConfig:
    num_scouts: int = 5
    required_successes: int = 1

    def __post_init__(self) -> None:
        if not 1 <= self.required_successes <= self.num_scouts:
            raise ValueError("need 1 <= required_successes <= num_scouts")


@dataclass(frozen=True)
class SubRegionSplitSpec:
    num_subregions: int = 256
    subregions_per_job: int = 4
    regions: int = 64

    @property
    def consistent(self) -> bool:
        return self.num_subregions == self.regions * self.subregions_per_job

    @property
    def jobs_per_batch(self) -> int:
        return self.num_subregions // self.subregions_per_job

    def check(self) -> None:
        if not self.consistent:
            raise SpecInconsistent(
                f"{self.num_subregions} sub-regions != {self.regions} regions x "
                f"{self.subregions_per_job} sub-regions per job"
            )


@dataclass(frozen=True)
class SiteSnapshot:
    site_id: str
    speed_factor: float = 1.0
    free_cores: int = 1
    max_walltime: float = math.inf
    min_job_events: int = 1
    max_job_events: int = 1_000_000_000

    def __post_init__(self) -> None:
        if not self.speed_factor > 0:
            raise ValueError("speed_factor must be > 0")
        if not 1 <= self.min_job_events <= self.max_job_events:
            raise ValueError("need 1 <= min_job_events <= max_job_events")


@dataclass(frozen=True)
class JobDefinition:
    id: str
    task_id: str
    input_range: EventRange
    est_cpu: float
    is_scout: bool = False
    attempt: int = 1
    predecessor: Optional[str] = None
    subregions: Optional[Tuple[int, ...]] = None
    site: Optional[str] = None

    def __post_init__(self) -> None:
        if self.attempt < 1:
            raise ValueError("attempt must be >= 1")
        if self.est_cpu < 0:
            raise ValueError("est_cpu must be >= 0")


class OutcomeKind(str, Enum):
    SUCCESS = "success"
    TRANSIENT = "transient_failure"
    PERMANENT = "permanent_failure"

    @property
    def ok(self) -> bool:
        return self is OutcomeKind.SUCCESS


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    duration: float
    corrupted_events: Tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return self.kind is OutcomeKind.SUCCESS


class ScoutVerdict(str, Enum):
    PROCEED = "Proceed"
    BROKEN = "Broken"


@dataclass(frozen=True)
class AcceptLoss:
    range: EventRange


@dataclass(frozen=True)
class ExhaustedRetries:
    range: EventRange


Redefinition = Union[list, AcceptLoss, ExhaustedRetries]


def events_per_job(cpu_per_event: float, site: SiteSnapshot, target_walltime: float) -> int:
    """Job size for ``site``: as many events as fit in the walltime target, clamped."""
    raw = math.floor(target_walltime * site.speed_factor / cpu_per_event)
    return max(site.min_job_events, min(site.max_job_events, raw))


def split_by_events(
    task: "Task", site: SiteSnapshot, target_walltime: float, events: int, *, first_index: int = 0
) -> list[JobDefinition]:
    c = task.transformation.cpu_per_event
    if events == 0:
        if task.transformation.kind is TransformKind.MERGE:
            return []
        raise EmptyInput(f"task {task.id} has an empty input dataset")
    size = events_per_job(c, site, target_walltime)
    return [
        JobDefinition(
            id=f"{task.id}#{first_index + i}",
            task_id=task.id,
            input_range=r,
            est_cpu=r.count * c,
        )
        for i, r in enumerate(partition_events(events, size))
    ]


def split_subregions(
    task: "Task", spec: SubRegionSplitSpec, batch: EventRange, *, first_index: int = 0
) -> list[JobDefinition]:
    """One job per sub-region slice; every job processes the whole batch."""
    spec.check()
    k = spec.subregions_per_job
    c = task.transformation.cpu_per_event
    return [
        JobDefinition(
            id=f"{task.id}#{first_index + j}",
            task_id=task.id,
            input_range=batch,
            est_cpu=batch.count * c * k / spec.num_subregions,
            subregions=tuple(range(j * k, (j + 1) * k)),
        )
        for j in range(spec.jobs_per_batch)
    ]


@dataclass(frozen=True)
class TaggedOutput:
    job_id: str
    subregions: Tuple[int, ...]


@dataclass(frozen=True)
class MergePlan:
    region_merges: Tuple[JobDefinition, ...]
    event_merge: JobDefinition


def plan_merge(
    outputs: Sequence[TaggedOutput],
    spec: SubRegionSplitSpec,
    *,
    batch: EventRange = EventRange(0, 1),
    region_task: str = "region-merge",
    event_task: str = "event-merge",
    cpu_per_event: float = 1.0,
    first_index: int = 0,
) -> MergePlan:
    """Two-step merge: sub-regions into whole regions, then regions into whole events."""
    spec.check()
    seen: Dict[int, int] = {}
    for out in outputs:
        for s in out.subregions:
            seen[s] = seen.get(s, 0) + 1
    dupes = sorted(s for s, n in seen.items() if n > 1)
    if dupes:
        raise DuplicateSubRegion(dupes)
    missing = [s for s in range(spec.num_subregions) if s not in seen]
    if missing:
        raise CoverageGap(missing)
    stray = sorted(s for s in seen if not 0 <= s < spec.num_subregions)
    if stray:
        raise SpecInconsistent(f"sub-region ids out of range: {stray}")

    k = spec.subregions_per_job
    merge_cpu = batch.count * cpu_per_event
    regions = tuple(
        JobDefinition(
            id=f"{region_task}#{first_index + r}",
            task_id=region_task,
            input_range=batch,
            est_cpu=merge_cpu / spec.regions,
            subregions=tuple(range(r * k, (r + 1) * k)),
        )
        for r in range(spec.regions)
    )
    event = JobDefinition(
        id=f"{event_task}#{first_index}",
        task_id=event_task,
        input_range=batch,
        est_cpu=merge_cpu,
        subregions=tuple(range(spec.num_subregions)),
    )
    return MergePlan(regions, event)


def pick_scouts(
    jobs: Sequence[JobDefinition], cfg: ScoutConfig
) -> Tuple[list[JobDefinition], list[JobDefinition]]:
    if not jobs:
        raise NoJobs("cannot pick scouts from an empty job list")
    ordered = sorted(jobs, key=lambda j: (j.input_range, j.subregions or ()))
    n = min(cfg.num_scouts, len(ordered))
    scouts = [replace(j, is_scout=True) for j in ordered[:n]]
    return scouts, list(ordered[n:])


def evaluate_scouts(results: Sequence[Optional[Outcome]], cfg: ScoutConfig) -> ScoutVerdict:
    """Gate bulk submission on the scouts' outcomes; ``None`` marks a scout still pending."""
    pending = sum(1 for r in results if r is None)
    if pending:
        raise IncompleteResults(f"{pending} scout(s) have not finished")
    successes = sum(1 for r in results if r.ok)
    # a task with fewer jobs than required_successes launches fewer scouts
    required = min(cfg.required_successes, len(results))
    return ScoutVerdict.PROCEED if successes >= required else ScoutVerdict.BROKEN


def redefine_failed(
    job: JobDefinition, policy: RetryPolicy, site: Optional[SiteSnapshot] = None
) -> Redefinition:
    """Decide what happens after ``job`` failed.

    Returns replacement jobs while attempts remain; with ``split_on_retry`` a
    multi-event range is halved so the retries are shorter than the original.
    Once attempts are exhausted the verdict is :class:`AcceptLoss` for
    loss-tolerant policies and :class:`ExhaustedRetries` otherwise.

    ``site`` is accepted for plugins that size retries by site; the default
    halving rule does not use it.
    """
    if job.attempt >= policy.max_attempts:
        if policy.tolerate_loss:
            return AcceptLoss(job.input_range)
        return ExhaustedRetries(job.input_range)
    nxt = job.attempt + 1
    if policy.split_on_retry and job.subregions is None and job.input_range.count > 1:
        per_event = job.est_cpu / job.input_range.count
        return [
            JobDefinition(
                id=f"{job.id}.{tag}",
                task_id=job.task_id,
                input_range=half,
                est_cpu=per_event * half.count,
                attempt=nxt,
                predecessor=job.id,
            )
            for tag, half in zip("ab", job.input_range.halves())
        ]
    return [replace(job, id=f"{job.id}.r", is_scout=False, attempt=nxt, predecessor=job.id, site=None)]


def expected_loss_fraction(policy: RetryPolicy, p_transient: float) -> float:
    """Probability that every attempt of a job fails, for independent attempts."""
    if policy.split_on_retry:
        raise UnsupportedPolicy("closed form only defined without split-on-retry")
    if not 0 <= p_transient < 1:
        raise ValueError("p_transient must be in [0, 1)")
    return p_transient**policy.max_attempts


# -- plugins -----------------------------------------------------------------


@dataclass(frozen=True)
class SplitContext:
    events: int
    site: SiteSnapshot
    target_walltime: float = 3600.0
    subregion_spec: SubRegionSplitSpec = SubRegionSplitSpec()
    batch_events: int = 100


@dataclass(frozen=True)
class SplitterPlugin:
    """A job-definition plugin.

    ``late_binding`` plugins are sized per site at dispatch time: the engine
    keeps the task's unassigned events as a pool and carves one job per free
    core. Fixed-shape plugins define every job up front through ``define``.
    """

    name: str
    define: Callable[["Task", SplitContext], list[JobDefinition]]
    late_binding: bool = False
    split_on_retry: bool = True


def _define_events(task: "Task", ctx: SplitContext) -> list[JobDefinition]:
    return split_by_events(task, ctx.site, ctx.target_walltime, ctx.events)


def _define_subregions(task: "Task", ctx: SplitContext) -> list[JobDefinition]:
    jobs: list[JobDefinition] = []
    for batch in partition_events(ctx.events, ctx.batch_events):
        jobs.extend(split_subregions(task, ctx.subregion_spec, batch, first_index=len(jobs)))
    return jobs


def _full_cover(spec: SubRegionSplitSpec) -> list[TaggedOutput]:
    k = spec.subregions_per_job
    return [TaggedOutput(f"s{j}", tuple(range(j * k, (j + 1) * k))) for j in range(spec.jobs_per_batch)]


def _define_region_merge(task: "Task", ctx: SplitContext) -> list[JobDefinition]:
    jobs: list[JobDefinition] = []
    cover = _full_cover(ctx.subregion_spec)
    for batch in partition_events(ctx.events, ctx.batch_events):
        plan = plan_merge(
            cover,
            ctx.subregion_spec,
            batch=batch,
            region_task=task.id,
            event_task=task.id,
            cpu_per_event=task.transformation.cpu_per_event,
            first_index=len(jobs),
        )
        jobs.extend(plan.region_merges)
    return jobs


def _define_event_merge(task: "Task", ctx: SplitContext) -> list[JobDefinition]:
    jobs: list[JobDefinition] = []
    cover = _full_cover(ctx.subregion_spec)
    for batch in partition_events(ctx.events, ctx.batch_events):
        plan = plan_merge(
            cover,
            ctx.subregion_spec,
            batch=batch,
            region_task=task.id,
            event_task=task.id,
            cpu_per_event=task.transformation.cpu_per_event,
            first_index=len(jobs),
        )
        jobs.append(plan.event_merge)
    return jobs


SPLITTERS: Dict[str, SplitterPlugin] = {
    "events": SplitterPlugin("events", _define_events, late_binding=True),
    "merge": SplitterPlugin("merge", _define_events, late_binding=True, split_on_retry=False),
    "subregion": SplitterPlugin("subregion", _define_subregions, split_on_retry=False),
    "region-merge": SplitterPlugin("region-merge", _define_region_merge, split_on_retry=False),
    "event-merge": SplitterPlugin("event-merge", _define_event_merge, split_on_retry=False),
}


def get_splitter(name: str) -> SplitterPlugin:
    try:
        return SPLITTERS[name]
    except KeyError:
        raise KeyError(f"no splitter plugin named {name!r}; known: {sorted(SPLITTERS)}") from None
