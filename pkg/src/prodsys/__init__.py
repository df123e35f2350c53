"""Desk-scale production system for dataset-driven workflows on a simulated grid."""

from .accounting import Metrics, campaign_report, compute_metrics
from .datamodel import DataType, Dataset, EventRange, TransformationSpec, check_edge, parse_data_type, partition_events
from .deft import Request, Task, TaskState, Workflow, apply_transition, compile_request, ready_tasks, validate_workflow
from .gridsim import EngineConfig, FailureModel, RunLog, Site, broker_assign, execute_attempt, run
from .jedi import RetryPolicy, ScoutConfig, SubRegionSplitSpec, expected_loss_fraction, redefine_failed
from .scenario import Scenario, load_preset, load_scenario

__version__ = "0.1.0"

__all__ = [
    "Metrics",
    "campaign_report",
    "compute_metrics",
    "DataType",
    "Dataset",
    "EventRange",
    "TransformationSpec",
    "check_edge",
    "parse_data_type",
    "partition_events",
    "Request",
    "Task",
    "TaskState",
    "Workflow",
    "apply_transition",
    "compile_request",
    "ready_tasks",
    "validate_workflow",
    "EngineConfig",
    "FailureModel",
    "RunLog",
    "Site",
    "broker_assign",
    "execute_attempt",
    "run",
    "RetryPolicy",
    "ScoutConfig",
    "SubRegionSplitSpec",
    "expected_loss_fraction",
    "redefine_failed",
    "Scenario",
    "load_preset",
    "load_scenario",
]
