"""pilotgrid: a pilot-job workflow manager for batch-scheduled clusters.

A persistent task store, a DAG engine, a fault-tolerant pilot launcher,
and a queue-submission service that packs tasks into right-sized batch
jobs.
"""

from .model import AppDefinition, StateEvent, Task, TaskState, new_task
from .project import Project, find_project, init_project
from .store import Store, TaskFilter

__version__ = "1.0.0"

__all__ = [
    "AppDefinition",
    "Project",
    "StateEvent",
    "Store",
    "Task",
    "TaskFilter",
    "TaskState",
    "find_project",
    "init_project",
    "new_task",
    "__version__",
]
