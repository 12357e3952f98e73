"""taskmesh: a distributed task-offloading runtime and benchmark harness.

The package is organised around a head node that derives a precedence DAG
from buffer-annotated tasks, schedules it onto worker nodes with an
adapted HEFT list scheduler, keeps buffer copies coherent with a
location directory, and drives execution through a tag-isolated
two-sided event protocol over either a deterministic virtual-time
simulator or a real multi-process TCP transport.
"""

__version__ = "0.1.0"

from .graph import (
    Buffer,
    DepDirection,
    KernelSpec,
    Program,
    Task,
    TaskGraph,
    TaskKind,
    derive_edges,
    validate,
)
from .scheduler import CostModel, Schedule, check_schedule, heft_schedule, upward_rank

__all__ = [
    "Buffer",
    "DepDirection",
    "KernelSpec",
    "Program",
    "Task",
    "TaskGraph",
    "TaskKind",
    "derive_edges",
    "validate",
    "CostModel",
    "Schedule",
    "check_schedule",
    "heft_schedule",
    "upward_rank",
    "__version__",
]
