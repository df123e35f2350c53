"""Workflow layer: templates, request compilation and the task state machine.

A request is a flat dictionary of parameters naming a template. Compiling it
yields a :class:`Workflow`, a DAG of tasks linked by the datasets they
produce and consume. Task state only moves through :func:`apply_transition`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .datamodel import (
    DataType,
    Dataset,
    DatasetStatus,
    TransformKind,
    TransformationSpec,
    check_edge,
    parse_data_type,
)
from .jedi import RetryPolicy

__all__ = [
    "TaskState",
    "TransitionEvent",
    "TRANSITIONS",
    "TERMINAL_STATES",
    "IllegalTransition",
    "UnknownTemplate",
    "MissingParam",
    "TemplateError",
    "Request",
    "TemplateStep",
    "WorkflowTemplate",
    "Task",
    "Workflow",
    "WorkflowState",
    "Diagnostic",
    "compile_request",
    "validate_workflow",
    "ready_tasks",
    "apply_transition",
    "builtin_templates",
    "to_dot",
]


class TaskState(str, Enum):
    REGISTERED = "registered"
    DEFINED = "defined"
    SCOUTING = "scouting"
    RUNNING = "running"
    PAUSED = "paused"
    FINISHED = "finished"
    DONE = "done"
    FAILED = "failed"
    BROKEN = "broken"
    ABORTED = "aborted"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset({TaskState.DONE, TaskState.FAILED, TaskState.BROKEN, TaskState.ABORTED})


class TransitionEvent(str, Enum):
    JOBS_DEFINED = "JobsDefined"
    SCOUTS_LAUNCHED = "ScoutsLaunched"
    SCOUTS_OK = "ScoutsOk"
    SCOUTS_FAILED = "ScoutsFailed"
    ALL_JOBS_DONE = "AllJobsDone"
    UNRECOVERABLE_LOSS = "UnrecoverableLoss"
    ABORT = "Abort"
    PAUSE = "Pause"
    RESUME = "Resume"
    OUTPUTS_REGISTERED = "OutputsRegistered"


S, E = TaskState, TransitionEvent

TRANSITIONS: Dict[Tuple[TaskState, TransitionEvent], TaskState] = {
    (S.REGISTERED, E.JOBS_DEFINED): S.DEFINED,
    (S.DEFINED, E.SCOUTS_LAUNCHED): S.SCOUTING,
    (S.SCOUTING, E.SCOUTS_OK): S.RUNNING,
    (S.SCOUTING, E.SCOUTS_FAILED): S.BROKEN,
    (S.RUNNING, E.ALL_JOBS_DONE): S.FINISHED,
    (S.RUNNING, E.UNRECOVERABLE_LOSS): S.FAILED,
    (S.FINISHED, E.OUTPUTS_REGISTERED): S.DONE,
    (S.RUNNING, E.PAUSE): S.PAUSED,
    (S.PAUSED, E.RESUME): S.RUNNING,
}
for _state in TaskState:
    if not _state.terminal:
        TRANSITIONS[(_state, E.ABORT)] = S.ABORTED
del S, E, _state


class DeftError(ValueError):
    pass


class IllegalTransition(DeftError):
    def __init__(self, state: TaskState, event: TransitionEvent, reason: str = ""):
        self.state = state
        self.event = event
        msg = f"no transition from {state.value} on {event.value}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class UnknownTemplate(DeftError):
    pass


class MissingParam(DeftError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"request is missing required parameter {key!r}")


class TemplateError(DeftError):
    pass


class CompileTypeMismatch(DeftError):
    pass


@dataclass(frozen=True)
class Request:
    id: str
    template: str
    params: Mapping[str, str] = field(default_factory=dict)
    priority: int = 0

    def __post_init__(self) -> None:
        if not self.template:
            raise DeftError("request template must be non-empty")


@dataclass(frozen=True)
class TemplateStep:
    """One step of a workflow template.

    ``inputs`` lists where the step reads from: the name of an earlier step,
    or ``$key`` for an external dataset whose name is ``params[key]`` and whose
    size is ``params[key + "_events"]``. The first entry is the primary input
    that gets split into jobs; any further entries are dependencies only
    (e.g. the pileup overlay sample). Empty means "the previous step".
    """

    name: str
    transformation: TransformationSpec
    splitter: str = "events"
    inputs: Tuple[str, ...] = ()

    @property
    def merge(self) -> bool:
        return self.transformation.kind is TransformKind.MERGE


@dataclass(frozen=True)
class WorkflowTemplate:
    name: str
    steps: Tuple[TemplateStep, ...]
    required_params: Tuple[str, ...] = ()
    tolerate_loss: bool = False

    def __post_init__(self) -> None:
        names = [s.name for s in self.steps]
        if len(set(names)) != len(names):
            raise TemplateError(f"template {self.name}: duplicate step names")
        if not self.steps:
            raise TemplateError(f"template {self.name}: no steps")
        by_name = {}
        for i, step in enumerate(self.steps):
            for src in self.sources(i):
                if src.startswith("$"):
                    continue
                if src not in by_name:
                    raise TemplateError(f"template {self.name}: step {step.name} reads unknown or later step {src!r}")
                producer = by_name[src]
                if all(check_edge(d, step.transformation) for d in producer.transformation.output_dtypes):
                    raise TemplateError(
                        f"template {self.name}: no output of {src} ({_fmt_types(producer.transformation.output_dtypes)}) "
                        f"matches {step.name} input {step.transformation.input_dtype}"
                    )
            by_name[step.name] = step

    def sources(self, index: int) -> Tuple[str, ...]:
        step = self.steps[index]
        if step.inputs:
            return step.inputs
        if index == 0:
            raise TemplateError(f"template {self.name}: first step {step.name} needs explicit inputs")
        return (self.steps[index - 1].name,)


def _fmt_types(types: Iterable[DataType]) -> str:
    return ",".join(str(t) for t in types)


@dataclass(frozen=True)
class Task:
    id: str
    transformation: TransformationSpec
    input: str
    outputs: Tuple[str, ...]
    retry_policy: RetryPolicy = RetryPolicy()
    splitter: str = "events"
    state: TaskState = TaskState.REGISTERED
    attempts_used: int = 0
    step: str = ""
    extra_inputs: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.outputs:
            raise DeftError(f"task {self.id} has no outputs")

    @property
    def inputs(self) -> Tuple[str, ...]:
        return (self.input,) + self.extra_inputs


class WorkflowState(str, Enum):
    BUILDING = "building"
    ACTIVE = "active"
    DONE = "done"
    FAILED = "failed"


@dataclass
class Workflow:
    """Tasks plus the datasets linking them.

    ``datasets`` holds the datasets produced inside the workflow;
    ``external`` holds inputs that come from outside and count as complete.
    The owner mutates a workflow sequentially, replacing frozen tasks and
    datasets as they change.
    """

    id: str
    tasks: Dict[str, Task]
    datasets: Dict[str, Dataset]
    external: Dict[str, Dataset] = field(default_factory=dict)
    state: WorkflowState = WorkflowState.BUILDING

    def producers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for t in self.tasks.values():
            for name in t.outputs:
                out.setdefault(name, []).append(t.id)
        return out

    def edges(self) -> List[Tuple[str, str, str]]:
        """(producer task, consumer task, dataset) triples in task order."""
        prod = self.producers()
        edges = []
        for t in self.tasks.values():
            for name in t.inputs:
                for p in prod.get(name, ()):
                    edges.append((p, t.id, name))
        return edges

    def dataset(self, name: str) -> Dataset:
        if name in self.datasets:
            return self.datasets[name]
        return self.external[name]

    def consumers(self, dataset: str) -> List[str]:
        return [t.id for t in self.tasks.values() if dataset in t.inputs]


def _dataset_name(req: Request, step: str, dtype: DataType) -> str:
    return f"{req.id}.{step}.{dtype}"


def compile_request(
    req: Request,
    registry: Mapping[str, WorkflowTemplate],
    retry: Optional[RetryPolicy] = None,
    step_retry: Optional[Mapping[str, RetryPolicy]] = None,
) -> Workflow:
    """Compile ``req`` into a workflow with one task per template step.

    With no explicit ``retry`` each task gets a default policy carrying the
    template's loss tolerance.
    """
    try:
        template = registry[req.template]
    except KeyError:
        raise UnknownTemplate(f"no template named {req.template!r}") from None
    for key in template.required_params:
        if key not in req.params:
            raise MissingParam(key)
    default_policy = retry if retry is not None else RetryPolicy(tolerate_loss=template.tolerate_loss)
    step_retry = step_retry or {}

    tasks: Dict[str, Task] = {}
    datasets: Dict[str, Dataset] = {}
    external: Dict[str, Dataset] = {}
    outputs_by_step: Dict[str, Tuple[str, ...]] = {}
    for i, step in enumerate(template.steps):
        spec = step.transformation
        resolved = []
        for src in template.sources(i):
            if src.startswith("$"):
                key = src[1:]
                for k in (key, f"{key}_events"):
                    if k not in req.params:
                        raise MissingParam(k)
                name = str(req.params[key])
                try:
                    events = int(req.params[f"{key}_events"])
                except ValueError:
                    raise DeftError(f"parameter {key}_events must be an integer") from None
                external[name] = Dataset.complete(name, spec.input_dtype, events)
                resolved.append(name)
            else:
                match = [
                    n for n in outputs_by_step[src] if check_edge(datasets[n].dtype, spec) is None
                ]
                if not match:
                    raise CompileTypeMismatch(f"step {step.name}: no output of {src} has type {spec.input_dtype}")
                resolved.append(match[0])
        outs = tuple(_dataset_name(req, step.name, d) for d in spec.output_dtypes)
        for name, dtype in zip(outs, spec.output_dtypes):
            datasets[name] = Dataset(name, dtype)
        outputs_by_step[step.name] = outs
        tid = f"{req.id}.{step.name}"
        tasks[tid] = Task(
            id=tid,
            transformation=spec,
            input=resolved[0],
            outputs=outs,
            retry_policy=step_retry.get(step.name, default_policy),
            splitter=step.splitter,
            step=step.name,
            extra_inputs=tuple(resolved[1:]),
        )
    return Workflow(id=req.id, tasks=tasks, datasets=datasets, external=external)


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    subjects: Tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


def _find_cycles(nodes: Sequence[str], succ: Mapping[str, List[str]]) -> List[List[str]]:
    white, grey, black = 0, 1, 2
    color = {n: white for n in nodes}
    cycles: List[List[str]] = []
    for root in nodes:
        if color[root] != white:
            continue
        stack = [(root, iter(succ.get(root, ())))]
        path = [root]
        color[root] = grey
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = black
            elif color[nxt] == grey:
                cycles.append(path[path.index(nxt):] + [nxt])
            elif color[nxt] == white:
                color[nxt] = grey
                path.append(nxt)
                stack.append((nxt, iter(succ.get(nxt, ()))))
    return cycles


def validate_workflow(wf: Workflow) -> List[Diagnostic]:
    """Every invariant violation of ``wf``; an empty list means the workflow is ok."""
    diags: List[Diagnostic] = []
    prod = wf.producers()
    for name, owners in prod.items():
        if len(owners) > 1:
            diags.append(Diagnostic("DuplicateProducer", f"dataset {name} produced by {', '.join(owners)}", (name, *owners)))
        if name in wf.external:
            diags.append(Diagnostic("DuplicateProducer", f"external dataset {name} also produced by {owners[0]}", (name,)))
    for t in wf.tasks.values():
        for name in t.inputs:
            if name not in prod and name not in wf.external:
                diags.append(Diagnostic("DanglingInput", f"task {t.id} reads {name}, which nothing produces", (t.id, name)))
                continue
            ds = wf.datasets.get(name) or wf.external.get(name)
            if ds is not None:
                mismatch = check_edge(ds.dtype, t.transformation)
                if mismatch is not None:
                    diags.append(Diagnostic("TypeMismatch", f"task {t.id} reading {name}: {mismatch}", (t.id, name)))
        for name in t.outputs:
            if name not in wf.datasets:
                diags.append(Diagnostic("UndeclaredOutput", f"task {t.id} writes undeclared dataset {name}", (t.id, name)))
    succ: Dict[str, List[str]] = {}
    for p, c, _ in wf.edges():
        succ.setdefault(p, []).append(c)
    for cycle in _find_cycles(list(wf.tasks), succ):
        diags.append(Diagnostic("Cycle", " -> ".join(cycle), tuple(cycle)))
    return diags


def ready_tasks(wf: Workflow) -> List[str]:
    """Registered tasks whose every input dataset is complete, in task order."""
    ready = []
    for t in wf.tasks.values():
        if t.state is not TaskState.REGISTERED:
            continue
        if all(wf.dataset(n).status is DatasetStatus.COMPLETE for n in t.inputs):
            ready.append(t.id)
    return ready


def apply_transition(task: Task, event: TransitionEvent) -> Task:
    event = TransitionEvent(event)
    target = TRANSITIONS.get((task.state, event))
    if target is None:
        raise IllegalTransition(task.state, event)
    if event is TransitionEvent.UNRECOVERABLE_LOSS and task.retry_policy.tolerate_loss:
        raise IllegalTransition(task.state, event, "loss-tolerant tasks never fail on lost events")
    return replace(task, state=target)


def to_dot(wf: Workflow) -> str:
    """Graphviz rendering: tasks as boxes, datasets as ellipses."""
    lines = [f'digraph "{wf.id}" {{', "  rankdir=LR;"]
    for name, ds in sorted(wf.external.items()):
        lines.append(f'  "{name}" [shape=ellipse, style=dashed, label="{name}\\n{ds.dtype} ({ds.total_events})"];')
    for name, ds in wf.datasets.items():
        lines.append(f'  "{name}" [shape=ellipse, label="{name}\\n{ds.dtype}"];')
    for t in wf.tasks.values():
        lines.append(f'  "{t.id}" [shape=box, label="{t.step or t.id}\\n{t.transformation.name} [{t.splitter}]"];')
        for name in t.inputs:
            lines.append(f'  "{name}" -> "{t.id}";')
        for name in t.outputs:
            lines.append(f'  "{t.id}" -> "{name}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- shipped templates -------------------------------------------------------


def _t(name, src, dsts, cpu, kind=TransformKind.TRANSFORM, selectivity=1.0) -> TransformationSpec:
    return TransformationSpec(
        name=name,
        input_dtype=parse_data_type(src),
        output_dtypes=tuple(parse_data_type(d) for d in dsts),
        cpu_per_event=cpu,
        kind=kind,
        selectivity=selectivity,
    )


def builtin_templates() -> Dict[str, WorkflowTemplate]:
    merge = TransformKind.MERGE
    reco = WorkflowTemplate(
        name="reco-chain",
        required_params=("input", "input_events"),
        tolerate_loss=False,
        steps=(
            TemplateStep("recon", _t("Reco_tf", "RAW", ["ESD"], 20.0), inputs=("$input",)),
            TemplateStep("esd2aod", _t("ESDtoAOD_tf", "ESD", ["AOD", "DESD"], 2.0)),
            TemplateStep("merge", _t("AODMerge_tf", "AOD", ["AOD"], 0.05, merge), splitter="merge", inputs=("esd2aod",)),
        ),
    )
    trigger = WorkflowTemplate(
        name="trigger-chain",
        required_params=("input", "input_events"),
        tolerate_loss=False,
        steps=(
            TemplateStep("hlt", _t("TrigReco_tf", "RAW", ["ESD"], 5.0), inputs=("$input",)),
            TemplateStep("monitor", _t("TrigMon_tf", "ESD", ["HIST"], 0.5)),
            TemplateStep("merge", _t("HISTMerge_tf", "HIST", ["HIST"], 0.01, merge), splitter="merge"),
        ),
    )
    mc = WorkflowTemplate(
        name="mc-chain",
        required_params=("hs", "hs_events", "mb", "mb_events"),
        tolerate_loss=True,
        steps=(
            TemplateStep("evgen-hs", _t("Generate_tf", "EVNT", ["EVNT"], 0.5), inputs=("$hs",)),
            TemplateStep("evgen-mb", _t("Generate_tf", "EVNT", ["EVNT"], 0.2), inputs=("$mb",)),
            TemplateStep("simul-hs", _t("Sim_tf", "EVNT", ["HITS"], 60.0), inputs=("evgen-hs",)),
            TemplateStep("simul-mb", _t("Sim_tf", "EVNT", ["HITS"], 30.0), inputs=("evgen-mb",)),
            TemplateStep("merge-hits", _t("HITSMerge_tf", "HITS", ["HITS"], 0.05, merge), splitter="merge", inputs=("simul-hs",)),
            TemplateStep("digi", _t("Digi_tf", "HITS", ["RDO"], 10.0), inputs=("merge-hits", "simul-mb")),
            TemplateStep("reco", _t("Reco_tf", "RDO", ["AOD"], 20.0)),
            TemplateStep("merge-aod", _t("AODMerge_tf", "AOD", ["AOD"], 0.05, merge), splitter="merge"),
            TemplateStep(
                "derive", _t("Derivation_tf", "AOD", ["DAOD"], 1.0, TransformKind.FILTER, selectivity=0.3)
            ),
        ),
    )
    ftk = WorkflowTemplate(
        name="ftk-sim",
        required_params=("input", "input_events"),
        tolerate_loss=True,
        steps=(
            TemplateStep("ftk-subregions", _t("FTKSim_tf", "RDO", ["NTUP_FTK"], 256.0), splitter="subregion", inputs=("$input",)),
            TemplateStep("ftk-regions", _t("FTKMerge_tf", "NTUP_FTK", ["NTUP_FTK"], 0.5, merge), splitter="region-merge"),
            TemplateStep("ftk-events", _t("FTKMerge_tf", "NTUP_FTK", ["NTUP_FTK"], 0.5, merge), splitter="event-merge"),
        ),
    )
    return {t.name: t for t in (reco, trigger, mc, ftk)}
