"""JSON messages exchanged between the workflow layer and the job layer.

Three message kinds travel between the layers: ``TaskActivate`` (workflow
layer to job layer), and ``JobStatus`` / ``TaskStatus`` going back up.
Encoding is canonical (sorted keys, no whitespace), so a message has exactly
one wire form.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Mapping

if TYPE_CHECKING:
    from .deft import Task

__all__ = ["MessageKind", "LayerMessage", "ProtocolError", "encode", "decode", "task_activate", "task_status", "job_status"]

PROTOCOL_VERSION = 1


class ProtocolError(ValueError):
    pass


class MessageKind(str, Enum):
    TASK_ACTIVATE = "TaskActivate"
    JOB_STATUS = "JobStatus"
    TASK_STATUS = "TaskStatus"


REQUIRED = {
    MessageKind.TASK_ACTIVATE: ("task", "transformation", "input", "outputs", "splitter", "retry_policy", "time"),
    MessageKind.JOB_STATUS: ("job", "task", "site", "attempt", "outcome", "start", "end"),
    MessageKind.TASK_STATUS: ("task", "state", "time"),
}


@dataclass(frozen=True)
class LayerMessage:
    kind: MessageKind
    body: Mapping[str, Any]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", MessageKind(self.kind))
        missing = [k for k in REQUIRED[self.kind] if k not in self.body]
        if missing:
            raise ProtocolError(f"{self.kind.value} message missing {missing}")
        try:
            # normalise to plain JSON types so equality survives a round trip
            body = json.loads(json.dumps(self.body, allow_nan=False))
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"body is not JSON-serialisable: {exc}") from None
        object.__setattr__(self, "body", body)


def encode(msg: LayerMessage) -> str:
    return json.dumps(
        {"v": PROTOCOL_VERSION, "kind": msg.kind.value, "body": msg.body},
        sort_keys=True,
        separators=(",", ":"),
        allow_nan=False,
    )


def decode(text: str) -> LayerMessage:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed message: {exc}") from None
    if not isinstance(raw, dict) or set(raw) != {"v", "kind", "body"}:
        raise ProtocolError("message must be an object with keys v, kind, body")
    if raw["v"] != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {raw['v']!r}")
    try:
        kind = MessageKind(raw["kind"])
    except ValueError:
        raise ProtocolError(f"unknown message kind {raw['kind']!r}") from None
    return LayerMessage(kind, raw["body"])


def task_activate(task: "Task", time: float) -> LayerMessage:
    spec = task.transformation
    return LayerMessage(
        MessageKind.TASK_ACTIVATE,
        {
            "task": task.id,
            "transformation": {
                "name": spec.name,
                "input": str(spec.input_dtype),
                "outputs": [str(d) for d in spec.output_dtypes],
                "cpu_per_event": spec.cpu_per_event,
                "kind": spec.kind.value,
                "selectivity": spec.selectivity,
            },
            "input": task.input,
            "outputs": list(task.outputs),
            "splitter": task.splitter,
            "retry_policy": asdict(task.retry_policy),
            "time": time,
        },
    )


def task_status(task_id: str, state: str, time: float) -> LayerMessage:
    return LayerMessage(MessageKind.TASK_STATUS, {"task": task_id, "state": state, "time": time})


def job_status(job_id: str, task_id: str, site: str, attempt: int, outcome: str, start: float, end: float) -> LayerMessage:
    return LayerMessage(
        MessageKind.JOB_STATUS,
        {"job": job_id, "task": task_id, "site": site, "attempt": attempt, "outcome": outcome, "start": start, "end": end},
    )
