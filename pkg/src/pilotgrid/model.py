"""Task record, application registry, and the task state machine.

Pure data and transition logic: no I/O, no persistence. Everything here
has value semantics and is safe to share across threads and processes.
"""

from __future__ import annotations

import enum
import re
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import IllegalTransition, InvalidField, NotNew, TimestampRegression

# Failure messages keep at most this much stderr tail per provenance row.
STDERR_TAIL_BYTES = 2048


class TaskState(str, enum.Enum):
    CREATED = "CREATED"
    AWAITING_PARENTS = "AWAITING_PARENTS"
    READY = "READY"
    STAGED_IN = "STAGED_IN"
    PREPROCESSED = "PREPROCESSED"
    RUNNING = "RUNNING"
    RUN_DONE = "RUN_DONE"
    RUN_ERROR = "RUN_ERROR"
    RUN_TIMEOUT = "RUN_TIMEOUT"
    POSTPROCESSED = "POSTPROCESSED"
    STAGED_OUT = "STAGED_OUT"
    JOB_FINISHED = "JOB_FINISHED"
    RESTART_READY = "RESTART_READY"
    FAILED = "FAILED"
    USER_KILLED = "USER_KILLED"

    def __str__(self):
        return self.value


TERMINAL_STATES = frozenset(
    {TaskState.JOB_FINISHED, TaskState.FAILED, TaskState.USER_KILLED}
)

# FAILED carries the single manual-restart edge; JOB_FINISHED and
# USER_KILLED are absorbing. Pipeline states feeding a hook or stage
# step also fail directly when that step errors out.
_EDGES = {
    TaskState.CREATED: {TaskState.AWAITING_PARENTS, TaskState.READY},
    TaskState.AWAITING_PARENTS: {TaskState.READY, TaskState.FAILED},
    TaskState.READY: {TaskState.STAGED_IN, TaskState.FAILED},
    TaskState.STAGED_IN: {TaskState.PREPROCESSED, TaskState.FAILED},
    TaskState.PREPROCESSED: {TaskState.RUNNING},
    TaskState.RUNNING: {
        TaskState.RUN_DONE,
        TaskState.RUN_ERROR,
        TaskState.RUN_TIMEOUT,
        TaskState.USER_KILLED,
    },
    TaskState.RUN_DONE: {TaskState.POSTPROCESSED, TaskState.FAILED},
    TaskState.POSTPROCESSED: {TaskState.STAGED_OUT, TaskState.FAILED},
    TaskState.STAGED_OUT: {TaskState.JOB_FINISHED},
    TaskState.RUN_ERROR: {TaskState.RESTART_READY, TaskState.FAILED},
    TaskState.RUN_TIMEOUT: {TaskState.RESTART_READY, TaskState.FAILED},
    TaskState.RESTART_READY: {TaskState.STAGED_IN, TaskState.FAILED},
    TaskState.FAILED: {TaskState.RESTART_READY},
    TaskState.JOB_FINISHED: set(),
    TaskState.USER_KILLED: set(),
}

TRANSITIONS = {
    s: frozenset(targets | ({TaskState.USER_KILLED} if s not in TERMINAL_STATES else set()))
    for s, targets in _EDGES.items()
}


def validate_transition(from_state: TaskState, to_state: TaskState) -> bool:
    """True iff (from -> to) is an edge of the canonical transition graph."""
    return to_state in TRANSITIONS[from_state]


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class StateEvent:
    """One provenance row: when a task entered a state, and why."""

    timestamp: datetime
    state: TaskState
    message: str = ""


@dataclass(frozen=True)
class AppDefinition:
    """A registered executable plus optional hook scripts and error policy.

    error_policy is one of "fail", "retry:N" (N = max attempts), "handler".
    """

    name: str
    executable: str
    preprocess: str = ""
    postprocess: str = ""
    error_policy: str = "fail"

    def __post_init__(self):
        if not self.name:
            raise InvalidField("application name must be non-empty")
        if not self.executable:
            raise InvalidField("application executable path must be non-empty")
        parse_error_policy(self.error_policy)

    @property
    def max_attempts(self) -> int:
        return parse_error_policy(self.error_policy)[1]


def parse_error_policy(policy: str) -> tuple[str, int]:
    """Split an error-policy string into (kind, max_attempts)."""
    if policy in ("fail", "handler"):
        return policy, 1
    m = re.fullmatch(r"retry:(\d+)", policy)
    if m and int(m.group(1)) > 0:
        return "retry", int(m.group(1))
    raise InvalidField(f"bad error_policy {policy!r}; expected fail, retry:N, or handler")


@dataclass(frozen=True)
class Task:
    """One application run with its resources, files, and provenance."""

    id: str
    name: str
    workflow: str
    application: str
    args: str = ""
    environment: dict = field(default_factory=dict)
    num_nodes: int = 1
    ranks_per_node: int = 1
    node_packing_count: int = 1
    wall_time_minutes: float = 0.0  # 0 means unknown
    input_files: str = ""
    stage_in_sources: tuple = ()
    stage_out_patterns: str = ""
    stage_out_dest: str = ""
    state: TaskState = TaskState.CREATED
    state_history: tuple = ()
    lock_owner: str | None = None
    batch_tag: str | None = None
    work_dir: str = ""

    def __post_init__(self):
        if self.num_nodes < 1 or self.ranks_per_node < 1 or self.node_packing_count < 1:
            raise InvalidField("num_nodes, ranks_per_node, node_packing_count must be >= 1")
        if self.node_packing_count > 1 and (self.num_nodes > 1 or self.ranks_per_node > 1):
            raise InvalidField(
                "node_packing_count > 1 requires num_nodes = ranks_per_node = 1"
            )
        if self.wall_time_minutes < 0:
            raise InvalidField("wall_time_minutes must be >= 0")
        if self.state_history and self.state_history[-1].state != self.state:
            raise InvalidField("state must equal the last history event's state")


def new_task(name: str, workflow: str, application: str, *, at: datetime | None = None,
             **fields) -> Task:
    """Build a CREATED task with a fresh UUID and one-event history."""
    at = at or utcnow()
    return Task(
        id=str(uuid.uuid4()),
        name=name,
        workflow=workflow,
        application=application,
        state=TaskState.CREATED,
        state_history=(StateEvent(at, TaskState.CREATED, "task created"),),
        **fields,
    )


def advance(task: Task, to: TaskState, message: str = "", at: datetime | None = None) -> Task:
    """Return a copy of `task` moved to `to`, with the history extended.

    Raises IllegalTransition for a non-edge and TimestampRegression when
    `at` precedes the last recorded event.
    """
    if not validate_transition(task.state, to):
        raise IllegalTransition(task.state, to, task.id)
    at = at or utcnow()
    if task.state_history and at < task.state_history[-1].timestamp:
        raise TimestampRegression(
            f"timestamp {at} precedes last event {task.state_history[-1].timestamp}"
        )
    return replace(
        task,
        state=to,
        state_history=task.state_history + (StateEvent(at, to, message),),
    )


def classify_new(task: Task, unfinished_parent_count: int) -> TaskState:
    """Initial routing of a freshly created task."""
    if task.state != TaskState.CREATED:
        raise NotNew(f"task {task.id} is {task.state}, not CREATED")
    if unfinished_parent_count == 0:
        return TaskState.READY
    return TaskState.AWAITING_PARENTS


def resolve_error_policy(policy: str, failed_state: TaskState, prior_failures: int) -> TaskState:
    """Map RUN_ERROR / RUN_TIMEOUT onward according to the app's policy.

    `prior_failures` counts RUN_ERROR / RUN_TIMEOUT events already in the
    history, including the current one. The "handler" decision itself
    happens in the launcher (the postprocess hook runs with the error
    context); this helper only answers for fail/retry.
    """
    kind, max_attempts = parse_error_policy(policy)
    if kind == "retry" and prior_failures < max_attempts:
        return TaskState.RESTART_READY
    return TaskState.FAILED


def tail_bytes(text: str, limit: int = STDERR_TAIL_BYTES) -> str:
    """Last `limit` bytes of text, for bounded provenance messages."""
    raw = text.encode("utf-8", errors="replace")
    if len(raw) <= limit:
        return text
    return raw[-limit:].decode("utf-8", errors="replace")
