"""DAG engine: dependencies, readiness propagation, file flow, kill, spawn.

Stateless between calls; every mutation funnels through the store's
atomic commits, so it is safe to call from hooks, the CLI, and the
launcher concurrently.
"""

from __future__ import annotations

import fnmatch
import os
from pathlib import Path

from . import model
from .errors import (
    AlreadyTerminal,
    BasenameCollision,
    ChildAlreadyStarted,
    CycleDetected,
    IllegalTransition,
    UnknownId,
)
from .model import Task, TaskState
from .store import Store, TaskFilter

# States a child may still be in when a new dependency edge is added.
_PRE_START = {TaskState.CREATED, TaskState.AWAITING_PARENTS, TaskState.READY}


def _reaches(store: Store, src: str, dst: str) -> bool:
    """True if dst is reachable from src along dependency edges."""
    stack, seen = [src], set()
    while stack:
        node = stack.pop()
        if node == dst:
            return True
        if node in seen:
            continue
        seen.add(node)
        stack.extend(store.children_of(node))
    return False


def add_dependency(store: Store, parent: str, child: str) -> tuple[str, str]:
    """Record parent -> child; re-classifies the child."""
    if parent == child:
        raise CycleDetected("a task cannot depend on itself")
    parent_task = store.get(parent)
    child_task = store.get(child)
    if child_task.state not in _PRE_START:
        raise ChildAlreadyStarted(
            f"child {child} already in state {child_task.state}"
        )
    if _reaches(store, child, parent):
        raise CycleDetected(f"edge {parent[:8]} -> {child[:8]} closes a cycle")
    store.add_edge(parent, child)
    _reclassify(store, child)
    return (parent, child)


def _unfinished_parents(store: Store, child: str) -> int:
    return sum(
        1
        for pid in store.parents_of(child)
        if store.get(pid).state != TaskState.JOB_FINISHED
    )


def _reclassify(store: Store, child: str) -> None:
    """Move a not-yet-started child between READY and AWAITING_PARENTS."""
    task = store.get(child)
    pending = _unfinished_parents(store, child)
    if task.state == TaskState.CREATED:
        to = model.classify_new(task, pending)
        store.update_batch([(child, to, "", model.utcnow())])
    elif task.state == TaskState.READY and pending > 0:
        _demote_ready(store, child)


def _demote_ready(store: Store, child: str) -> None:
    # The transition graph has no READY -> AWAITING_PARENTS edge (tasks
    # normally enter READY only once all parents are done), so a late
    # edge addition rewrites the state column directly.
    with store._txn():
        store._conn.execute(
            "UPDATE tasks SET state = ? WHERE id = ?",
            (TaskState.AWAITING_PARENTS.value, child),
        )
        last = store._conn.execute(
            "SELECT seq FROM events WHERE task_id = ? ORDER BY seq DESC LIMIT 1",
            (child,),
        ).fetchone()
        store._conn.execute(
            "INSERT INTO events VALUES (?,?,?,?,?)",
            (
                child,
                last["seq"] + 1,
                model.utcnow().isoformat(),
                TaskState.AWAITING_PARENTS.value,
                "new dependency added",
            ),
        )


def _try_advance(store: Store, task_id: str, to: TaskState, message: str) -> bool:
    # Concurrent launchers sweep the same store; losing a race to apply
    # the same promotion is expected and harmless.
    try:
        store.update_batch([(task_id, to, message, model.utcnow())])
        return True
    except IllegalTransition:
        return False


def classify_created(store: Store) -> list[tuple[str, TaskState]]:
    """Route every CREATED task to READY or AWAITING_PARENTS."""
    applied = []
    for task in store.query(TaskFilter(states={TaskState.CREATED})):
        to = model.classify_new(task, _unfinished_parents(store, task.id))
        if _try_advance(store, task.id, to, ""):
            applied.append((task.id, to))
    return applied


def on_parent_terminal(store: Store, parent: str) -> list[tuple[str, TaskState]]:
    """Propagate a parent's terminal state to its children.

    JOB_FINISHED promotes waiting children whose parents are all done;
    FAILED / USER_KILLED cascades failure through all descendants.
    """
    parent_task = store.get(parent)
    if parent_task.state not in model.TERMINAL_STATES:
        return []
    applied = []
    if parent_task.state == TaskState.JOB_FINISHED:
        for cid in store.children_of(parent):
            child = store.get(cid)
            if (
                child.state == TaskState.AWAITING_PARENTS
                and _unfinished_parents(store, cid) == 0
                and _try_advance(store, cid, TaskState.READY, "all parents finished")
            ):
                applied.append((cid, TaskState.READY))
    else:
        reason = f"parent {parent[:8]} ended {parent_task.state}"
        for cid in store.children_of(parent):
            child = store.get(cid)
            if child.state == TaskState.AWAITING_PARENTS and _try_advance(
                store, cid, TaskState.FAILED, reason
            ):
                applied.append((cid, TaskState.FAILED))
                applied.extend(on_parent_terminal(store, cid))
    return applied


def refresh_readiness(store: Store) -> list[tuple[str, TaskState]]:
    """Sweep AWAITING_PARENTS tasks against current parent states."""
    applied = []
    for task in store.query(TaskFilter(states={TaskState.AWAITING_PARENTS})):
        parents = [store.get(p) for p in store.parents_of(task.id)]
        if any(
            p.state in (TaskState.FAILED, TaskState.USER_KILLED) for p in parents
        ):
            if _try_advance(store, task.id, TaskState.FAILED, "a parent failed"):
                applied.append((task.id, TaskState.FAILED))
        elif all(p.state == TaskState.JOB_FINISHED for p in parents):
            if _try_advance(store, task.id, TaskState.READY, "all parents finished"):
                applied.append((task.id, TaskState.READY))
    return applied


def resolve_inputs(child: Task, parents: list[Task]) -> list[tuple[str, str]]:
    """Match the child's input_files globs against parent work dirs.

    Returns (source path, destination name) pairs; destination name is the
    source basename. Two distinct parents exporting the same basename is a
    BasenameCollision.
    """
    patterns = child.input_files.split()
    if not patterns:
        return []
    found = {}  # basename -> (source, parent id)
    for parent in sorted(parents, key=lambda p: p.id):
        if not parent.work_dir:
            continue
        work = Path(parent.work_dir)
        if not work.is_dir():
            continue
        for entry in sorted(os.listdir(work)):
            if not any(fnmatch.fnmatch(entry, pat) for pat in patterns):
                continue
            src = str(work / entry)
            if entry in found and found[entry][1] != parent.id:
                raise BasenameCollision(
                    f"{entry!r} provided by parents "
                    f"{found[entry][1][:8]} and {parent.id[:8]}"
                )
            found[entry] = (src, parent.id)
    return [(src, base) for base, (src, _) in sorted(found.items())]


def descendants(store: Store, root: str) -> set[str]:
    out, stack = set(), [root]
    while stack:
        node = stack.pop()
        for cid in store.children_of(node):
            if cid not in out:
                out.add(cid)
                stack.append(cid)
    return out


def kill(store: Store, target: str, recursive: bool = False) -> list[str]:
    """Mark a task (and optionally its descendant closure) USER_KILLED.

    A RUNNING target keeps its process until the launcher observes the
    state change and signals it, within one dispatch cycle.
    """
    task = store.get(target)  # raises UnknownId
    if task.state in model.TERMINAL_STATES:
        raise AlreadyTerminal(f"task {target} is already {task.state}")
    victims = [target]
    if recursive:
        victims += sorted(descendants(store, target))
    marked = []
    for vid in victims:
        t = store.get(vid)
        if t.state in model.TERMINAL_STATES:
            continue
        store.update_batch(
            [(vid, TaskState.USER_KILLED, "killed by user", model.utcnow())]
        )
        marked.append(vid)
    return marked


def spawn(store: Store, task: Task, parent: str | None = None) -> str:
    """Insert a new task at runtime, optionally hanging it off a parent."""
    store.insert([task])
    if parent is not None:
        add_dependency(store, parent, task.id)
    else:
        _reclassify(store, task.id)
    return task.id
