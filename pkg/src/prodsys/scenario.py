"""Scenario files: everything needed to reproduce a simulated campaign.

Scenarios are YAML documents with an explicit ``schema_version``. Unknown
keys are rejected at every level so typos never silently fall back to a
default. ``render`` and ``parse_scenario`` are inverses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from .datamodel import TransformKind, TransformationSpec, parse_data_type
from .deft import Request, TemplateStep, Workflow, WorkflowTemplate, builtin_templates, compile_request
from .gridsim import EngineConfig, FailureModel, Fault, Site
from .jedi import SPLITTERS, RetryPolicy, ScoutConfig, SubRegionSplitSpec

__all__ = [
    "Scenario",
    "ScenarioError",
    "ParseError",
    "UnknownKey",
    "DanglingReference",
    "SCHEMA_VERSION",
    "load_scenario",
    "parse_scenario",
    "load_preset",
    "preset_names",
]

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    pass


class ParseError(ScenarioError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class UnknownKey(ScenarioError):
    def __init__(self, key: str, where: str):
        self.key = key
        self.where = where
        super().__init__(f"unknown key {key!r} in {where}")


class DanglingReference(ScenarioError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    request: Request
    sites: Tuple[Site, ...]
    seeds: Tuple[int, ...] = (1,)
    retry: Optional[RetryPolicy] = None
    step_retry: Mapping[str, RetryPolicy] = field(default_factory=dict)
    scouts: ScoutConfig = ScoutConfig()
    subregion_spec: SubRegionSplitSpec = SubRegionSplitSpec()
    batch_events: int = 100
    merge_events: int = 20_000
    target_walltime: float = 3600.0
    horizon: float = 1e9
    faults: Tuple[Fault, ...] = ()
    scale_factor: float = 1.0
    templates: Tuple[WorkflowTemplate, ...] = ()
    description: str = ""

    def registry(self) -> Dict[str, WorkflowTemplate]:
        reg = builtin_templates()
        reg.update({t.name: t for t in self.templates})
        return reg

    def workflow(self) -> Workflow:
        return compile_request(self.request, self.registry(), self.retry, self.step_retry)

    def engine_config(self, horizon: Optional[float] = None) -> EngineConfig:
        return EngineConfig(
            target_walltime=self.target_walltime,
            horizon=self.horizon if horizon is None else horizon,
            scouts=self.scouts,
            subregion_spec=self.subregion_spec,
            batch_events=self.batch_events,
            merge_events=self.merge_events,
            faults=self.faults,
            scale_factor=self.scale_factor,
        )

    @property
    def label(self) -> str:
        return str(self.request.params.get("campaign", self.name))

    def to_dict(self) -> dict:
        doc: Dict[str, Any] = {"schema_version": SCHEMA_VERSION, "name": self.name}
        if self.description:
            doc["description"] = self.description
        doc["seeds"] = list(self.seeds)
        doc["horizon"] = self.horizon
        doc["target_walltime"] = self.target_walltime
        doc["scale_factor"] = self.scale_factor
        doc["batch_events"] = self.batch_events
        doc["merge_events"] = self.merge_events
        doc["request"] = {
            "id": self.request.id,
            "template": self.request.template,
            "priority": self.request.priority,
            "params": {str(k): str(v) for k, v in self.request.params.items()},
        }
        if self.retry is not None:
            doc["retry"] = _policy_dict(self.retry)
        if self.step_retry:
            doc["step_retry"] = {k: _policy_dict(v) for k, v in self.step_retry.items()}
        doc["scouts"] = {"num_scouts": self.scouts.num_scouts, "required_successes": self.scouts.required_successes}
        doc["ftk"] = {
            "num_subregions": self.subregion_spec.num_subregions,
            "subregions_per_job": self.subregion_spec.subregions_per_job,
            "regions": self.subregion_spec.regions,
        }
        doc["sites"] = [_site_dict(s) for s in self.sites]
        if self.faults:
            doc["faults"] = [{"step": f.step, "event": f.event} for f in self.faults]
        if self.templates:
            doc["templates"] = [_template_dict(t) for t in self.templates]
        return doc

    def render(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)


def _policy_dict(p: RetryPolicy) -> dict:
    return {
        "max_attempts": p.max_attempts,
        "tolerate_loss": p.tolerate_loss,
        "loss_budget": p.loss_budget,
        "split_on_retry": p.split_on_retry,
    }


def _site_dict(s: Site) -> dict:
    f = s.failure
    return {
        "id": s.id,
        "cores": s.cores,
        "speed_factor": s.speed_factor,
        "max_walltime": s.max_walltime,
        "min_job_events": s.min_job_events,
        "max_job_events": s.max_job_events,
        "failure": {
            "p_transient": f.p_transient,
            "p_permanent": f.p_permanent,
            "p_silent_per_event": f.p_silent_per_event,
            "failure_point": f.failure_point,
        },
    }


def _template_dict(t: WorkflowTemplate) -> dict:
    return {
        "name": t.name,
        "required_params": list(t.required_params),
        "tolerate_loss": t.tolerate_loss,
        "steps": [
            {
                "name": s.name,
                "splitter": s.splitter,
                "inputs": list(s.inputs),
                "transformation": {
                    "name": s.transformation.name,
                    "input": str(s.transformation.input_dtype),
                    "outputs": [str(d) for d in s.transformation.output_dtypes],
                    "cpu_per_event": s.transformation.cpu_per_event,
                    "kind": s.transformation.kind.value,
                    "selectivity": s.transformation.selectivity,
                },
            }
            for s in t.steps
        ],
    }


# -- parsing -----------------------------------------------------------------


def _check_keys(obj: Any, where: str, required: Tuple[str, ...], optional: Tuple[str, ...] = ()) -> dict:
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where} must be a mapping")
    allowed = set(required) | set(optional)
    for key in obj:
        if key not in allowed:
            raise UnknownKey(str(key), where)
    for key in required:
        if key not in obj:
            raise ScenarioError(f"{where} is missing required key {key!r}")
    return obj


def _int(v: Any, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(f"{where} must be an integer, got {v!r}")
    return v


def _float(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where} must be a number, got {v!r}")
    return float(v)


def _policy(d: Any, where: str) -> RetryPolicy:
    d = _check_keys(d, where, ("max_attempts",), ("tolerate_loss", "loss_budget", "split_on_retry"))
    return RetryPolicy(
        max_attempts=_int(d["max_attempts"], f"{where}.max_attempts"),
        tolerate_loss=bool(d.get("tolerate_loss", False)),
        loss_budget=_float(d.get("loss_budget", 1e-8), f"{where}.loss_budget"),
        split_on_retry=bool(d.get("split_on_retry", False)),
    )


def _site(d: Any, where: str) -> Site:
    d = _check_keys(
        d, where, ("id", "cores"),
        ("speed_factor", "max_walltime", "min_job_events", "max_job_events", "failure"),
    )
    fd = _check_keys(
        d.get("failure", {}), f"{where}.failure", (),
        ("p_transient", "p_permanent", "p_silent_per_event", "failure_point"),
    )
    fp = fd.get("failure_point")
    failure = FailureModel(
        p_transient=_float(fd.get("p_transient", 0.0), f"{where}.failure.p_transient"),
        p_permanent=_float(fd.get("p_permanent", 0.0), f"{where}.failure.p_permanent"),
        p_silent_per_event=_float(fd.get("p_silent_per_event", 0.0), f"{where}.failure.p_silent_per_event"),
        failure_point=None if fp is None else _float(fp, f"{where}.failure.failure_point"),
    )
    return Site(
        id=str(d["id"]),
        cores=_int(d["cores"], f"{where}.cores"),
        speed_factor=_float(d.get("speed_factor", 1.0), f"{where}.speed_factor"),
        failure=failure,
        max_walltime=_float(d.get("max_walltime", math.inf), f"{where}.max_walltime"),
        min_job_events=_int(d.get("min_job_events", 1), f"{where}.min_job_events"),
        max_job_events=_int(d.get("max_job_events", 1_000_000_000), f"{where}.max_job_events"),
    )


def _template(d: Any, where: str) -> WorkflowTemplate:
    d = _check_keys(d, where, ("name", "steps"), ("required_params", "tolerate_loss"))
    steps = []
    for i, sd in enumerate(d["steps"]):
        sw = f"{where}.steps[{i}]"
        sd = _check_keys(sd, sw, ("name", "transformation"), ("splitter", "inputs"))
        td = _check_keys(
            sd["transformation"], f"{sw}.transformation", ("name", "input", "outputs", "cpu_per_event"),
            ("kind", "selectivity"),
        )
        splitter = str(sd.get("splitter", "events"))
        if splitter not in SPLITTERS:
            raise DanglingReference(f"{sw}: unknown splitter {splitter!r}")
        spec = TransformationSpec(
            name=str(td["name"]),
            input_dtype=parse_data_type(str(td["input"])),
            output_dtypes=tuple(parse_data_type(str(o)) for o in td["outputs"]),
            cpu_per_event=_float(td["cpu_per_event"], f"{sw}.transformation.cpu_per_event"),
            kind=TransformKind(td.get("kind", "transform")),
            selectivity=_float(td.get("selectivity", 1.0), f"{sw}.transformation.selectivity"),
        )
        steps.append(TemplateStep(str(sd["name"]), spec, splitter, tuple(str(x) for x in sd.get("inputs", ()))))
    return WorkflowTemplate(
        name=str(d["name"]),
        steps=tuple(steps),
        required_params=tuple(str(p) for p in d.get("required_params", ())),
        tolerate_loss=bool(d.get("tolerate_loss", False)),
    )


TOP_REQUIRED = ("schema_version", "name", "request", "sites")
TOP_OPTIONAL = (
    "description", "seeds", "horizon", "target_walltime", "scale_factor", "batch_events", "merge_events",
    "retry", "step_retry", "scouts", "ftk", "faults", "templates",
)


def scenario_from_dict(doc: Any) -> Scenario:
    doc = _check_keys(doc, "scenario", TOP_REQUIRED, TOP_OPTIONAL)
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {doc['schema_version']!r}")
    rd = _check_keys(doc["request"], "request", ("id", "template"), ("priority", "params"))
    request = Request(
        id=str(rd["id"]),
        template=str(rd["template"]),
        params={str(k): str(v) for k, v in (rd.get("params") or {}).items()},
        priority=_int(rd.get("priority", 0), "request.priority"),
    )
    sites = tuple(_site(s, f"sites[{i}]") for i, s in enumerate(doc["sites"]))
    if not sites:
        raise ScenarioError("scenario needs at least one site")
    if len({s.id for s in sites}) != len(sites):
        raise ScenarioError("site ids must be unique")
    seeds = doc.get("seeds", [1])
    if not isinstance(seeds, list) or not seeds:
        raise ScenarioError("seeds must be a non-empty list of integers")
    sc = _check_keys(doc.get("scouts", {}), "scouts", (), ("num_scouts", "required_successes"))
    fd = _check_keys(doc.get("ftk", {}), "ftk", (), ("num_subregions", "subregions_per_job", "regions"))
    faults = []
    for i, f in enumerate(doc.get("faults") or []):
        f = _check_keys(f, f"faults[{i}]", ("step", "event"))
        faults.append(Fault(str(f["step"]), _int(f["event"], f"faults[{i}].event")))
    scenario = Scenario(
        name=str(doc["name"]),
        description=str(doc.get("description", "")),
        request=request,
        sites=sites,
        seeds=tuple(_int(s, "seeds[]") for s in seeds),
        retry=_policy(doc["retry"], "retry") if "retry" in doc else None,
        step_retry={str(k): _policy(v, f"step_retry.{k}") for k, v in (doc.get("step_retry") or {}).items()},
        scouts=ScoutConfig(
            num_scouts=_int(sc.get("num_scouts", 5), "scouts.num_scouts"),
            required_successes=_int(sc.get("required_successes", 1), "scouts.required_successes"),
        ),
        subregion_spec=SubRegionSplitSpec(
            num_subregions=_int(fd.get("num_subregions", 256), "ftk.num_subregions"),
            subregions_per_job=_int(fd.get("subregions_per_job", 4), "ftk.subregions_per_job"),
            regions=_int(fd.get("regions", 64), "ftk.regions"),
        ),
        batch_events=_int(doc.get("batch_events", 100), "batch_events"),
        merge_events=_int(doc.get("merge_events", 20_000), "merge_events"),
        target_walltime=_float(doc.get("target_walltime", 3600.0), "target_walltime"),
        horizon=_float(doc.get("horizon", 1e9), "horizon"),
        faults=tuple(faults),
        scale_factor=_float(doc.get("scale_factor", 1.0), "scale_factor"),
        templates=tuple(_template(t, f"templates[{i}]") for i, t in enumerate(doc.get("templates") or [])),
    )
    _resolve(scenario)
    return scenario


def _resolve(s: Scenario) -> None:
    registry = s.registry()
    if s.request.template not in registry:
        raise DanglingReference(f"request names unknown template {s.request.template!r}")
    template = registry[s.request.template]
    steps = {st.name for st in template.steps}
    for name in s.step_retry:
        if name not in steps:
            raise DanglingReference(f"step_retry names unknown step {name!r}")
    for f in s.faults:
        if f.step not in steps:
            raise DanglingReference(f"fault names unknown step {f.step!r}")
    for st in template.steps:
        if st.splitter not in SPLITTERS:
            raise DanglingReference(f"step {st.name} uses unknown splitter {st.splitter!r}")


def parse_scenario(text: str) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ParseError(str(getattr(exc, "problem", exc)), mark.line + 1, mark.column + 1) from None
        raise ParseError(str(exc)) from None
    return scenario_from_dict(doc)


def load_scenario(path: Union[str, Path]) -> Scenario:
    return parse_scenario(Path(path).read_text())


def preset_names() -> list[str]:
    root = resources.files("prodsys") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> Scenario:
    path = resources.files("prodsys") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise DanglingReference(f"no preset named {name!r}; known: {preset_names()}")
    return parse_scenario(path.read_text())
