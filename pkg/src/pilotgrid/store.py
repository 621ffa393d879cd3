"""Persistent task store: sqlite-backed, multi-process safe.

One store per project directory, living under ``<project>/store/``. All
mutations run inside short immediate transactions; readers use WAL
snapshots and never block behind writers for longer than one commit.
Task acquisition uses expiring leases instead of row locks, so a crashed
launcher's work becomes reacquirable without manual cleanup.
"""

from __future__ import annotations

import json
import sqlite3
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import model
from .errors import (
    AmbiguousPrefix,
    DuplicateApp,
    DuplicateId,
    IllegalTransition,
    TimestampRegression,
    UnknownApplication,
    UnknownId,
)
from .model import AppDefinition, StateEvent, Task, TaskState

DEFAULT_LEASE_SECONDS = 120.0


class _Unset:
    def __repr__(self):
        return "<unset>"

    def __bool__(self):
        return False


#: Sentinel for "no constraint" in TaskFilter fields where None means IS NULL.
UNSET = _Unset()


@dataclass
class TaskFilter:
    """Conjunction of optional clauses; the empty filter matches everything."""

    states: set | None = None
    name_contains: str | None = None
    workflow: str | None = None
    application: str | None = None
    num_nodes_min: int | None = None
    num_nodes_max: int | None = None
    batch_tag: object = UNSET  # a value, or None meaning "is null"
    lock_owner: object = UNSET  # a value, or None meaning "is null"
    ids: set | None = None

    def clauses(self):
        where, params = [], []
        if self.states is not None:
            names = sorted(TaskState(s).value for s in self.states)
            where.append(f"state IN ({','.join('?' * len(names))})")
            params.extend(names)
        if self.name_contains is not None:
            where.append("instr(name, ?) > 0")
            params.append(self.name_contains)
        if self.workflow is not None:
            where.append("workflow = ?")
            params.append(self.workflow)
        if self.application is not None:
            where.append("application = ?")
            params.append(self.application)
        if self.num_nodes_min is not None:
            where.append("num_nodes >= ?")
            params.append(self.num_nodes_min)
        if self.num_nodes_max is not None:
            where.append("num_nodes <= ?")
            params.append(self.num_nodes_max)
        if self.batch_tag is None:
            where.append("batch_tag IS NULL")
        elif self.batch_tag is not UNSET:
            where.append("batch_tag = ?")
            params.append(self.batch_tag)
        if self.lock_owner is None:
            where.append("lock_owner IS NULL")
        elif self.lock_owner is not UNSET:
            where.append("lock_owner = ?")
            params.append(self.lock_owner)
        if self.ids is not None:
            ids = sorted(self.ids)
            where.append(f"id IN ({','.join('?' * len(ids))})")
            params.extend(ids)
        return where, params


_SCHEMA = """
CREATE TABLE IF NOT EXISTS apps (
    name TEXT PRIMARY KEY,
    executable TEXT NOT NULL,
    preprocess TEXT NOT NULL DEFAULT '',
    postprocess TEXT NOT NULL DEFAULT '',
    error_policy TEXT NOT NULL DEFAULT 'fail'
);
CREATE TABLE IF NOT EXISTS tasks (
    id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    workflow TEXT NOT NULL,
    application TEXT NOT NULL,
    args TEXT NOT NULL DEFAULT '',
    environment TEXT NOT NULL DEFAULT '{}',
    num_nodes INTEGER NOT NULL DEFAULT 1,
    ranks_per_node INTEGER NOT NULL DEFAULT 1,
    node_packing_count INTEGER NOT NULL DEFAULT 1,
    wall_time_minutes REAL NOT NULL DEFAULT 0,
    input_files TEXT NOT NULL DEFAULT '',
    stage_in_sources TEXT NOT NULL DEFAULT '[]',
    stage_out_patterns TEXT NOT NULL DEFAULT '',
    stage_out_dest TEXT NOT NULL DEFAULT '',
    state TEXT NOT NULL,
    lock_owner TEXT,
    lock_expires REAL,
    lease_seconds REAL,
    batch_tag TEXT,
    work_dir TEXT NOT NULL DEFAULT '',
    created TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_tasks_state ON tasks(state);
CREATE INDEX IF NOT EXISTS idx_tasks_order ON tasks(created, id);
CREATE TABLE IF NOT EXISTS events (
    task_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    ts TEXT NOT NULL,
    state TEXT NOT NULL,
    message TEXT NOT NULL DEFAULT '',
    PRIMARY KEY (task_id, seq)
);
CREATE TABLE IF NOT EXISTS deps (
    parent TEXT NOT NULL,
    child TEXT NOT NULL,
    PRIMARY KEY (parent, child)
);
CREATE TABLE IF NOT EXISTS batch_jobs (
    id TEXT PRIMARY KEY,
    queue_name TEXT NOT NULL,
    num_nodes INTEGER NOT NULL,
    walltime_minutes REAL NOT NULL,
    job_mode TEXT NOT NULL,
    scheduler_id TEXT,
    status TEXT NOT NULL,
    created TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS service_lock (
    slot INTEGER PRIMARY KEY CHECK (slot = 1),
    owner TEXT NOT NULL,
    expires REAL NOT NULL
);
"""


def _iso(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat(timespec="microseconds")


def _from_iso(s: str) -> datetime:
    return datetime.fromisoformat(s)


class Store:
    """Handle to a project's task database.

    A handle may be shared between threads of one process provided
    mutation calls are serialized; this class serializes them internally
    with a lock. Separate processes open separate handles.
    """

    def __init__(self, store_dir):
        self.store_dir = Path(store_dir)
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self.db_path = self.store_dir / "tasks.db"
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(
            self.db_path, timeout=30.0, check_same_thread=False,
            isolation_level=None,
        )
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=NORMAL")
        self._conn.execute("PRAGMA busy_timeout=30000")
        self._conn.executescript(_SCHEMA)

    def close(self):
        self._conn.close()

    def _txn(self):
        return _Txn(self)

    # -- applications ------------------------------------------------------

    def register_app(self, app: AppDefinition):
        with self._txn():
            cur = self._conn.execute("SELECT 1 FROM apps WHERE name = ?", (app.name,))
            if cur.fetchone():
                raise DuplicateApp(f"application {app.name!r} already registered")
            self._conn.execute(
                "INSERT INTO apps VALUES (?,?,?,?,?)",
                (app.name, app.executable, app.preprocess, app.postprocess, app.error_policy),
            )

    def get_app(self, name: str) -> AppDefinition:
        row = self._conn.execute("SELECT * FROM apps WHERE name = ?", (name,)).fetchone()
        if row is None:
            raise UnknownApplication(f"no application named {name!r}")
        return AppDefinition(
            name=row["name"],
            executable=row["executable"],
            preprocess=row["preprocess"],
            postprocess=row["postprocess"],
            error_policy=row["error_policy"],
        )

    def list_apps(self) -> list[AppDefinition]:
        rows = self._conn.execute("SELECT name FROM apps ORDER BY name").fetchall()
        return [self.get_app(r["name"]) for r in rows]

    # -- tasks -------------------------------------------------------------

    def insert(self, tasks: list[Task]) -> list[str]:
        """Durably store CREATED tasks in one atomic group."""
        for t in tasks:
            if t.state != TaskState.CREATED or len(t.state_history) != 1:
                raise IllegalTransition(t.state, TaskState.CREATED, t.id)
        with self._txn():
            known_apps = {
                r["name"] for r in self._conn.execute("SELECT name FROM apps")
            }
            for t in tasks:
                if t.application not in known_apps:
                    raise UnknownApplication(
                        f"task {t.name!r} references unknown application {t.application!r}"
                    )
                if self._conn.execute(
                    "SELECT 1 FROM tasks WHERE id = ?", (t.id,)
                ).fetchone():
                    raise DuplicateId(t.id)
                self._insert_one(t)
        return [t.id for t in tasks]

    def _insert_one(self, t: Task):
        self._conn.execute(
            "INSERT INTO tasks (id,name,workflow,application,args,environment,"
            "num_nodes,ranks_per_node,node_packing_count,wall_time_minutes,"
            "input_files,stage_in_sources,stage_out_patterns,stage_out_dest,"
            "state,lock_owner,lock_expires,lease_seconds,batch_tag,work_dir,created) "
            "VALUES (?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
            (
                t.id, t.name, t.workflow, t.application, t.args,
                json.dumps(t.environment), t.num_nodes, t.ranks_per_node,
                t.node_packing_count, t.wall_time_minutes, t.input_files,
                json.dumps(list(t.stage_in_sources)), t.stage_out_patterns,
                t.stage_out_dest, t.state.value, t.lock_owner, None, None,
                t.batch_tag, t.work_dir, _iso(t.state_history[0].timestamp),
            ),
        )
        for seq, ev in enumerate(t.state_history):
            self._conn.execute(
                "INSERT INTO events VALUES (?,?,?,?,?)",
                (t.id, seq, _iso(ev.timestamp), ev.state.value, ev.message),
            )

    def _row_to_task(self, row, history) -> Task:
        return Task(
            id=row["id"],
            name=row["name"],
            workflow=row["workflow"],
            application=row["application"],
            args=row["args"],
            environment=json.loads(row["environment"]),
            num_nodes=row["num_nodes"],
            ranks_per_node=row["ranks_per_node"],
            node_packing_count=row["node_packing_count"],
            wall_time_minutes=row["wall_time_minutes"],
            input_files=row["input_files"],
            stage_in_sources=tuple(json.loads(row["stage_in_sources"])),
            stage_out_patterns=row["stage_out_patterns"],
            stage_out_dest=row["stage_out_dest"],
            state=TaskState(row["state"]),
            state_history=tuple(history),
            lock_owner=row["lock_owner"],
            batch_tag=row["batch_tag"],
            work_dir=row["work_dir"],
        )

    def _history(self, task_id: str) -> list[StateEvent]:
        rows = self._conn.execute(
            "SELECT ts, state, message FROM events WHERE task_id = ? ORDER BY seq",
            (task_id,),
        ).fetchall()
        return [
            StateEvent(_from_iso(r["ts"]), TaskState(r["state"]), r["message"])
            for r in rows
        ]

    def query(self, flt: TaskFilter | None = None) -> list[Task]:
        """All tasks matching every clause, in creation order."""
        flt = flt or TaskFilter()
        where, params = flt.clauses()
        sql = "SELECT * FROM tasks"
        if where:
            sql += " WHERE " + " AND ".join(where)
        sql += " ORDER BY created, id"
        rows = self._conn.execute(sql, params).fetchall()
        return [self._row_to_task(r, self._history(r["id"])) for r in rows]

    def count(self, flt: TaskFilter | None = None) -> int:
        flt = flt or TaskFilter()
        where, params = flt.clauses()
        sql = "SELECT COUNT(*) FROM tasks"
        if where:
            sql += " WHERE " + " AND ".join(where)
        return self._conn.execute(sql, params).fetchone()[0]

    def get(self, task_id: str) -> Task:
        row = self._conn.execute(
            "SELECT * FROM tasks WHERE id = ?", (task_id,)
        ).fetchone()
        if row is None:
            raise UnknownId(task_id)
        return self._row_to_task(row, self._history(task_id))

    def resolve_prefix(self, prefix: str) -> str:
        """Expand a unique task-id prefix to the full UUID."""
        rows = self._conn.execute(
            "SELECT id FROM tasks WHERE id LIKE ?", (prefix + "%",)
        ).fetchall()
        if not rows:
            raise UnknownId(prefix)
        if len(rows) > 1:
            raise AmbiguousPrefix(f"{prefix!r} matches {len(rows)} tasks")
        return rows[0]["id"]

    def update_batch(self, changes) -> int:
        """Apply state transitions all-or-nothing.

        ``changes`` is a list of (task_id, to_state, message, at) tuples.
        Each transition is validated against the currently stored state;
        any illegal edge rolls back the whole batch.
        """
        if not changes:
            return 0
        with self._txn():
            count = 0
            for task_id, to, message, at in changes:
                row = self._conn.execute(
                    "SELECT state FROM tasks WHERE id = ?", (task_id,)
                ).fetchone()
                if row is None:
                    raise UnknownId(task_id)
                cur_state = TaskState(row["state"])
                if not model.validate_transition(cur_state, to):
                    raise IllegalTransition(cur_state, to, task_id)
                last = self._conn.execute(
                    "SELECT seq, ts FROM events WHERE task_id = ? "
                    "ORDER BY seq DESC LIMIT 1",
                    (task_id,),
                ).fetchone()
                at = at or model.utcnow()
                if last and at < _from_iso(last["ts"]):
                    raise TimestampRegression(
                        f"task {task_id}: {at} precedes {last['ts']}"
                    )
                seq = (last["seq"] + 1) if last else 0
                self._conn.execute(
                    "UPDATE tasks SET state = ? WHERE id = ?", (to.value, task_id)
                )
                self._conn.execute(
                    "INSERT INTO events VALUES (?,?,?,?,?)",
                    (task_id, seq, _iso(at), to.value, message),
                )
                count += 1
            return count

    def update_fields(self, task_id: str, **fields) -> None:
        """Set non-state columns (work_dir, batch_tag, ...) on one task."""
        allowed = {"work_dir", "batch_tag", "wall_time_minutes", "args", "environment"}
        bad = set(fields) - allowed
        if bad:
            raise ValueError(f"not updatable: {sorted(bad)}")
        if "environment" in fields:
            fields["environment"] = json.dumps(fields["environment"])
        with self._txn():
            if not self._conn.execute(
                "SELECT 1 FROM tasks WHERE id = ?", (task_id,)
            ).fetchone():
                raise UnknownId(task_id)
            sets = ", ".join(f"{k} = ?" for k in fields)
            self._conn.execute(
                f"UPDATE tasks SET {sets} WHERE id = ?",
                (*fields.values(), task_id),
            )

    # -- leases ------------------------------------------------------------

    def acquire(self, flt: TaskFilter, limit: int, owner: str,
                lease_seconds: float = DEFAULT_LEASE_SECONDS) -> list[Task]:
        """Atomically lease up to `limit` matching tasks to `owner`.

        Tasks already under a live lease are skipped; expired leases are
        claimable by anyone. Concurrent acquirers receive disjoint sets.
        """
        if not owner:
            raise ValueError("owner must be non-empty")
        now = time.time()
        where, params = flt.clauses()
        where.append("(lock_owner IS NULL OR lock_expires <= ?)")
        params.append(now)
        sql = (
            "SELECT id FROM tasks WHERE " + " AND ".join(where)
            + " ORDER BY created, id LIMIT ?"
        )
        params.append(limit)
        with self._txn():
            ids = [r["id"] for r in self._conn.execute(sql, params)]
            for task_id in ids:
                self._conn.execute(
                    "UPDATE tasks SET lock_owner = ?, lock_expires = ?, "
                    "lease_seconds = ? WHERE id = ?",
                    (owner, now + lease_seconds, lease_seconds, task_id),
                )
        return [self.get(i) for i in ids]

    def renew_or_release(self, owner: str, renew: bool) -> int:
        now = time.time()
        with self._txn():
            if renew:
                cur = self._conn.execute(
                    "UPDATE tasks SET lock_expires = ? + lease_seconds "
                    "WHERE lock_owner = ? AND lock_expires > ?",
                    (now, owner, now),
                )
            else:
                cur = self._conn.execute(
                    "UPDATE tasks SET lock_owner = NULL, lock_expires = NULL, "
                    "lease_seconds = NULL WHERE lock_owner = ?",
                    (owner,),
                )
            return cur.rowcount

    def release_task(self, task_id: str) -> None:
        with self._txn():
            self._conn.execute(
                "UPDATE tasks SET lock_owner = NULL, lock_expires = NULL, "
                "lease_seconds = NULL WHERE id = ?",
                (task_id,),
            )

    def remove(self, task_ids: list[str]) -> None:
        """Delete tasks with their histories and dependency edges."""
        with self._txn():
            for tid in task_ids:
                self._conn.execute("DELETE FROM events WHERE task_id = ?", (tid,))
                self._conn.execute(
                    "DELETE FROM deps WHERE parent = ? OR child = ?", (tid, tid)
                )
                self._conn.execute("DELETE FROM tasks WHERE id = ?", (tid,))

    # -- dependencies ------------------------------------------------------

    def add_edge(self, parent: str, child: str) -> None:
        with self._txn():
            self._conn.execute(
                "INSERT OR IGNORE INTO deps VALUES (?, ?)", (parent, child)
            )

    def parents_of(self, child: str) -> list[str]:
        return [
            r["parent"]
            for r in self._conn.execute(
                "SELECT parent FROM deps WHERE child = ?", (child,)
            )
        ]

    def children_of(self, parent: str) -> list[str]:
        return [
            r["child"]
            for r in self._conn.execute(
                "SELECT child FROM deps WHERE parent = ?", (parent,)
            )
        ]

    def edges(self) -> list[tuple[str, str]]:
        return [
            (r["parent"], r["child"])
            for r in self._conn.execute("SELECT parent, child FROM deps")
        ]

    # -- batch jobs --------------------------------------------------------

    def save_batch_job(self, spec) -> None:
        with self._txn():
            self._conn.execute(
                "INSERT OR REPLACE INTO batch_jobs VALUES (?,?,?,?,?,?,?,?)",
                (
                    spec.id, spec.queue_name, spec.num_nodes,
                    spec.walltime_minutes, spec.job_mode, spec.scheduler_id,
                    spec.status, _iso(model.utcnow()),
                ),
            )

    def update_batch_job(self, job_id: str, **fields) -> None:
        allowed = {"scheduler_id", "status"}
        bad = set(fields) - allowed
        if bad:
            raise ValueError(f"not updatable: {sorted(bad)}")
        with self._txn():
            sets = ", ".join(f"{k} = ?" for k in fields)
            self._conn.execute(
                f"UPDATE batch_jobs SET {sets} WHERE id = ?",
                (*fields.values(), job_id),
            )

    def list_batch_jobs(self, statuses=None) -> list[sqlite3.Row]:
        sql = "SELECT * FROM batch_jobs"
        params = []
        if statuses:
            sql += f" WHERE status IN ({','.join('?' * len(statuses))})"
            params = list(statuses)
        sql += " ORDER BY created, id"
        return self._conn.execute(sql, params).fetchall()

    def queued_counts(self) -> dict:
        rows = self._conn.execute(
            "SELECT queue_name, COUNT(*) AS n FROM batch_jobs "
            "WHERE status IN ('pending-submit', 'queued', 'running') "
            "GROUP BY queue_name"
        ).fetchall()
        return {r["queue_name"]: r["n"] for r in rows}

    def tag_tasks(self, task_ids: list[str], batch_tag: str | None) -> None:
        with self._txn():
            for task_id in task_ids:
                self._conn.execute(
                    "UPDATE tasks SET batch_tag = ? WHERE id = ?",
                    (batch_tag, task_id),
                )

    # -- service lock ------------------------------------------------------

    def acquire_service_lock(self, owner: str, ttl: float = 60.0) -> bool:
        now = time.time()
        with self._txn():
            row = self._conn.execute("SELECT * FROM service_lock").fetchone()
            if row and row["owner"] != owner and row["expires"] > now:
                return False
            self._conn.execute(
                "INSERT OR REPLACE INTO service_lock VALUES (1, ?, ?)",
                (owner, now + ttl),
            )
            return True

    def release_service_lock(self, owner: str) -> None:
        with self._txn():
            self._conn.execute(
                "DELETE FROM service_lock WHERE owner = ?", (owner,)
            )


class _Txn:
    """BEGIN IMMEDIATE transaction scope holding the handle's mutation lock."""

    def __init__(self, store: Store):
        self.store = store

    def __enter__(self):
        self.store._lock.acquire()
        # Nested use (methods calling methods) rides the outer transaction.
        self.nested = self.store._conn.in_transaction
        if not self.nested:
            self.store._conn.execute("BEGIN IMMEDIATE")
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if not self.nested:
                if exc_type is None:
                    self.store._conn.commit()
                else:
                    self.store._conn.rollback()
        finally:
            self.store._lock.release()
        return False
