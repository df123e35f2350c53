"""Data types, datasets and event-range arithmetic.

Everything here is immutable; values can be shared freely between the
workflow layer, the job layer and the simulator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

__all__ = [
    "BASES",
    "DataType",
    "Dataset",
    "DatasetStatus",
    "EventRange",
    "TransformKind",
    "TransformationSpec",
    "UnknownBase",
    "MalformedQualifier",
    "TypeMismatch",
    "parse_data_type",
    "partition_events",
    "check_edge",
]

BASES = (
    "RAW",
    "ESD",
    "AOD",
    "DPD",
    "RDO",
    "DESD",
    "DAOD",
    "NTUP",
    "HIST",
    "EVNT",
    "HITS",
)

_QUALIFIER_RE = re.compile(r"^[A-Z0-9_]+$")


class DataModelError(ValueError):
    pass


class UnknownBase(DataModelError):
    pass


class MalformedQualifier(DataModelError):
    pass


@dataclass(frozen=True)
class TypeMismatch:
    """Diagnostic for a producer/consumer edge whose data types differ."""

    produced: "DataType"
    expected: "DataType"

    def __str__(self) -> str:
        return f"TypeMismatch: producer emits {self.produced}, consumer expects {self.expected}"


@dataclass(frozen=True, order=True)
class DataType:
    base: str
    qualifier: Optional[str] = None

    def __post_init__(self) -> None:
        if self.base not in BASES:
            raise UnknownBase(f"unknown data type base {self.base!r}")
        if self.qualifier is not None and not _QUALIFIER_RE.match(self.qualifier):
            raise MalformedQualifier(f"illegal qualifier {self.qualifier!r}")

    def __str__(self) -> str:
        if self.qualifier is None:
            return self.base
        return f"{self.base}_{self.qualifier}"


def parse_data_type(text: str) -> DataType:
    """Parse a short name such as ``AOD`` or ``NTUP_FTK``.

    The text is split on the first underscore; everything after it is the
    qualifier.
    """
    if not text:
        raise MalformedQualifier("empty data type name")
    base, sep, qualifier = text.partition("_")
    if base not in BASES:
        raise UnknownBase(f"unknown data type base {base!r} in {text!r}")
    if sep and not qualifier:
        raise MalformedQualifier(f"empty qualifier in {text!r}")
    return DataType(base, qualifier if sep else None)


@dataclass(frozen=True, order=True)
class EventRange:
    first: int
    count: int

    def __post_init__(self) -> None:
        if self.first < 0:
            raise ValueError(f"EventRange.first must be >= 0, got {self.first}")
        if self.count < 1:
            raise ValueError(f"EventRange.count must be >= 1, got {self.count}")

    @property
    def stop(self) -> int:
        return self.first + self.count

    def __contains__(self, index: object) -> bool:
        return isinstance(index, int) and self.first <= index < self.stop

    def halves(self) -> Tuple["EventRange", "EventRange"]:
        """Split into a ceil-sized head and a floor-sized tail."""
        if self.count < 2:
            raise ValueError("cannot halve a single-event range")
        head = (self.count + 1) // 2
        return EventRange(self.first, head), EventRange(self.first + head, self.count - head)


def partition_events(total: int, chunk: int) -> list[EventRange]:
    if total < 0:
        raise ValueError("total must be >= 0")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return [EventRange(first, min(chunk, total - first)) for first in range(0, total, chunk)]


class DatasetStatus(str, Enum):
    DECLARED = "declared"
    PARTIAL = "partial"
    COMPLETE = "complete"
    FAILED = "failed"


@dataclass(frozen=True)
class Dataset:
    name: str
    dtype: DataType
    total_events: int = 0
    ranges: Tuple[EventRange, ...] = ()
    status: DatasetStatus = DatasetStatus.DECLARED

    def __post_init__(self) -> None:
        if self.total_events < 0:
            raise ValueError("total_events must be >= 0")
        if self.total_events == 0 and self.status not in (DatasetStatus.DECLARED, DatasetStatus.FAILED):
            raise ValueError(f"dataset {self.name} with no events must be declared or failed")
        prev_stop = 0
        for r in self.ranges:
            if r.first < prev_stop:
                raise ValueError(f"dataset {self.name}: ranges overlap or are unsorted")
            prev_stop = r.stop
        if prev_stop > self.total_events:
            raise ValueError(f"dataset {self.name}: ranges exceed total_events")
        if self.status is DatasetStatus.COMPLETE and covered(self.ranges) != self.total_events:
            raise ValueError(f"dataset {self.name}: complete but ranges do not cover all events")

    @classmethod
    def complete(cls, name: str, dtype: DataType, total_events: int) -> "Dataset":
        if total_events == 0:
            return cls(name, dtype, 0, (), DatasetStatus.FAILED)
        return cls(name, dtype, total_events, (EventRange(0, total_events),), DatasetStatus.COMPLETE)


def covered(ranges: Sequence[EventRange]) -> int:
    return sum(r.count for r in ranges)


class TransformKind(str, Enum):
    TRANSFORM = "transform"
    MERGE = "merge"
    FILTER = "filter"


@dataclass(frozen=True)
class TransformationSpec:
    name: str
    input_dtype: DataType
    output_dtypes: Tuple[DataType, ...]
    cpu_per_event: float
    kind: TransformKind = TransformKind.TRANSFORM
    selectivity: float = 1.0

    def __post_init__(self) -> None:
        if not self.output_dtypes:
            raise ValueError(f"{self.name}: output_dtypes must be non-empty")
        if not self.cpu_per_event > 0:
            raise ValueError(f"{self.name}: cpu_per_event must be > 0")
        if not 0 < self.selectivity <= 1:
            raise ValueError(f"{self.name}: selectivity must be in (0, 1]")
        if self.kind is not TransformKind.FILTER and self.selectivity != 1.0:
            raise ValueError(f"{self.name}: only filters may have selectivity < 1")
        if self.kind is TransformKind.MERGE and self.input_dtype not in self.output_dtypes:
            raise ValueError(f"{self.name}: merge must preserve its input data type")

    def selected(self, rng: EventRange) -> int:
        """Number of events from ``rng`` that pass this transformation.

        Selection is a deterministic floor ladder, so it is additive over
        adjacent ranges: the counts of the pieces sum to the count of the whole.
        """
        if self.selectivity == 1.0:
            return rng.count
        s = self.selectivity
        return int(rng.stop * s) - int(rng.first * s)


def check_edge(producer_output: DataType, consumer: TransformationSpec) -> Optional[TypeMismatch]:
    """Return ``None`` when the edge type-checks, otherwise a diagnostic."""
    if producer_output == consumer.input_dtype:
        return None
    return TypeMismatch(producer_output, consumer.input_dtype)
