"""Queue-policy scheduling service.

Packs eligible tasks into elastic batch jobs with a first-fit-descending
list-scheduling simulation, submits them through a platform adapter
under per-queue limits, tags each task with its batch job, and
reconciles against queue-state drift (externally deleted jobs, jobs
that ran out of walltime with work left over).
"""

from __future__ import annotations

import json
import logging
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import dag
from .errors import InvalidField, SubmitFailure
from .model import TaskState
from .store import Store, TaskFilter
from .platforms import JOB_MODE_MPI, JOB_MODE_SERIAL

log = logging.getLogger("pilotgrid.service")

DEFAULT_CYCLE_SECONDS = 10.0
WALLTIME_SAFETY = 1.25  # margin on explicit runtime estimates

# Tag-clearing never touches tasks at RUNNING or beyond.
_UNSTARTED = {
    TaskState.CREATED,
    TaskState.AWAITING_PARENTS,
    TaskState.READY,
    TaskState.RESTART_READY,
    TaskState.STAGED_IN,
    TaskState.PREPROCESSED,
}


@dataclass(frozen=True)
class QueueRange:
    lo: int
    hi: int
    wall_min_hours: float
    wall_max_hours: float

    def __post_init__(self):
        if not (0 < self.lo <= self.hi):
            raise InvalidField(f"bad node range [{self.lo}, {self.hi}]")
        if not (0 < self.wall_min_hours <= self.wall_max_hours):
            raise InvalidField(
                f"bad walltime range [{self.wall_min_hours}, {self.wall_max_hours}]"
            )

    @property
    def wall_min_minutes(self):
        return self.wall_min_hours * 60.0

    @property
    def wall_max_minutes(self):
        return self.wall_max_hours * 60.0


@dataclass(frozen=True)
class QueueRule:
    queue_name: str
    max_queued: int
    ranges: tuple

    def __post_init__(self):
        if self.max_queued < 1:
            raise InvalidField("max_queued must be positive")
        spans = sorted((r.lo, r.hi) for r in self.ranges)
        for (_, hi_prev), (lo, _) in zip(spans, spans[1:]):
            if lo <= hi_prev:
                raise InvalidField(
                    f"queue {self.queue_name}: overlapping node ranges"
                )


@dataclass(frozen=True)
class QueuePolicy:
    queues: tuple

    @property
    def max_nodes(self) -> int:
        return max((r.hi for q in self.queues for r in q.ranges), default=0)


def load_policy(path) -> QueuePolicy:
    raw = json.loads(Path(path).read_text())
    queues = []
    for entry in raw:
        ranges = tuple(
            QueueRange(
                int(r["nodes"][0]), int(r["nodes"][1]),
                float(r["walltime_hours"][0]), float(r["walltime_hours"][1]),
            )
            for r in entry["ranges"]
        )
        queues.append(
            QueueRule(entry["queue_name"], int(entry["max_queued"]), ranges)
        )
    return QueuePolicy(tuple(queues))


@dataclass
class BatchJobSpec:
    id: str
    queue_name: str
    num_nodes: int
    walltime_minutes: float
    job_mode: str
    task_ids: list
    scheduler_id: str | None = None
    status: str = "pending-submit"


@dataclass
class PackResult:
    specs: list
    leftover: list = field(default_factory=list)


def simulate_schedule(tasks, capacity: int, est) -> tuple[float, int]:
    """Greedy list schedule of (nodes, duration) work onto `capacity` nodes.

    Tasks start in list order as soon as enough nodes are free. Returns
    (makespan minutes, max concurrent nodes in use).
    """
    pending = list(tasks)
    running = []  # (end_time, nodes)
    now, free, makespan, max_used = 0.0, capacity, 0.0, 0
    while pending or running:
        started = True
        while started:
            started = False
            for i, t in enumerate(pending):
                if t.num_nodes <= free:
                    dur = est(t)
                    running.append((now + dur, t.num_nodes))
                    free -= t.num_nodes
                    max_used = max(max_used, capacity - free)
                    makespan = max(makespan, now + dur)
                    del pending[i]
                    started = True
                    break
        if not running:
            break  # nothing fits at all (callers pre-filter oversize tasks)
        end = min(e for e, _ in running)
        now = end
        done = [r for r in running if r[0] <= now]
        for r in done:
            running.remove(r)
            free += r[1]
    return makespan, max_used


def eligible(store: Store) -> list:
    """Untagged, unleased tasks that are ready for (re)execution."""
    store_clear_expired(store)
    dag.classify_created(store)
    dag.refresh_readiness(store)
    return store.query(
        TaskFilter(
            states={TaskState.READY, TaskState.RESTART_READY},
            batch_tag=None,
            lock_owner=None,
        )
    )


def store_clear_expired(store: Store) -> None:
    now = time.time()
    with store._txn():
        store._conn.execute(
            "UPDATE tasks SET lock_owner = NULL, lock_expires = NULL, "
            "lease_seconds = NULL WHERE lock_owner IS NOT NULL "
            "AND lock_expires <= ?",
            (now,),
        )


def _pick_range(policy: QueuePolicy, headroom: dict, min_nodes: int):
    """Largest admissible node range with submission headroom."""
    best = None
    for rule in policy.queues:
        if headroom.get(rule.queue_name, 0) <= 0:
            continue
        for rng in rule.ranges:
            if rng.hi < min_nodes:
                continue
            key = (rng.hi, rng.lo, rule.queue_name)
            if best is None or key > best[0]:
                best = (key, rule, rng)
    if best is None:
        return None, None
    return best[1], best[2]


def _order_key(t):
    created = t.state_history[0].timestamp if t.state_history else 0
    return (-t.num_nodes, created, t.id)


def pack(tasks, policy: QueuePolicy, queued_now: dict) -> PackResult:
    """Greedily pack tasks into elastic batch job specs.

    Deterministic: input creation order plus stable descending-node sort
    and the stated range preference fully determine the output.
    """
    result = PackResult(specs=[])
    todo = sorted(tasks, key=_order_key)
    oversize = [t for t in todo if t.num_nodes > policy.max_nodes]
    for t in oversize:
        log.warning(
            "task %s needs %d nodes; no policy range admits it", t.id[:8], t.num_nodes
        )
    result.leftover.extend(oversize)
    todo = [t for t in todo if t.num_nodes <= policy.max_nodes]

    headroom = {
        q.queue_name: q.max_queued - queued_now.get(q.queue_name, 0)
        for q in policy.queues
    }
    while todo:
        rule, rng = _pick_range(policy, headroom, todo[0].num_nodes)
        if rule is None:
            result.leftover.extend(todo)
            break
        wall_min, wall_max = rng.wall_min_minutes, rng.wall_max_minutes

        def est(t, _min=wall_min):
            return t.wall_time_minutes if t.wall_time_minutes > 0 else _min

        def est_margin(t, _min=wall_min):
            if t.wall_time_minutes > 0:
                return t.wall_time_minutes * WALLTIME_SAFETY
            return _min

        chosen, rest = [], []
        for t in todo:
            if t.num_nodes > rng.hi:
                rest.append(t)
                continue
            makespan, _ = simulate_schedule(chosen + [t], rng.hi, est)
            if makespan <= wall_max + 1e-9:
                chosen.append(t)
            else:
                rest.append(t)
        if not chosen:
            # The largest task alone exceeds the range maximum walltime;
            # no admissible job can run it under this policy.
            t = todo[0]
            log.warning(
                "task %s estimate %.1f min exceeds every range limit",
                t.id[:8], t.wall_time_minutes,
            )
            result.leftover.append(t)
            todo = todo[1:]
            continue
        # Final geometry: request exactly the concurrency the schedule
        # reaches, clamped into the range; trim if the tighter node
        # count stretches the schedule past the range maximum.
        spill = []
        while True:
            _, used = simulate_schedule(chosen, rng.hi, est)
            num_nodes = min(max(used, rng.lo), rng.hi)
            makespan, _ = simulate_schedule(chosen, num_nodes, est)
            if makespan <= wall_max + 1e-9 or len(chosen) == 1:
                break
            spill.append(chosen.pop())
        rest = sorted(rest + spill, key=_order_key)
        margined, _ = simulate_schedule(chosen, num_nodes, est_margin)
        walltime = min(max(max(makespan, margined), wall_min), wall_max)
        mode = (
            JOB_MODE_SERIAL
            if all(t.num_nodes == 1 and t.ranks_per_node == 1 for t in chosen)
            else JOB_MODE_MPI
        )
        result.specs.append(
            BatchJobSpec(
                id=str(uuid.uuid4()),
                queue_name=rule.queue_name,
                num_nodes=num_nodes,
                walltime_minutes=walltime,
                job_mode=mode,
                task_ids=[t.id for t in chosen],
            )
        )
        headroom[rule.queue_name] -= 1
        todo = rest
    return result


def render_batch_script(template_text: str, spec: BatchJobSpec) -> str:
    return template_text.format(
        num_nodes=spec.num_nodes,
        walltime_minutes=spec.walltime_minutes,
        queue=spec.queue_name,
        batch_tag=spec.id,
        job_mode=spec.job_mode,
    )


def submit_cycle(project, policy: QueuePolicy, platform, dry_run=False) -> list:
    """One pass: pack eligible tasks, tag them, and submit batch jobs."""
    store = project.store
    packed = pack(eligible(store), policy, store.queued_counts())
    if dry_run:
        for spec in packed.specs:
            print(
                f"[dry-run] queue={spec.queue_name} nodes={spec.num_nodes} "
                f"walltime_min={spec.walltime_minutes:.1f} mode={spec.job_mode} "
                f"tasks={len(spec.task_ids)}"
            )
        for t in packed.leftover:
            print(f"[dry-run] leftover: {t.id[:8]} ({t.num_nodes} nodes)")
        return []
    template_text = (project.template_dir / "batch_job.tmpl").read_text()
    submitted = []
    for spec in packed.specs:
        store.tag_tasks(spec.task_ids, spec.id)
        store.save_batch_job(spec)
        script = project.log_dir / f"batchjob-{spec.id[:8]}.sh"
        script.write_text(render_batch_script(template_text, spec))
        try:
            sid = platform.submit(script, spec)
        except Exception as exc:  # adapter rejection: roll back the tag
            store.tag_tasks(spec.task_ids, None)
            with store._txn():
                store._conn.execute(
                    "DELETE FROM batch_jobs WHERE id = ?", (spec.id,)
                )
            log.warning("submit failed for %s: %s", spec.id[:8], exc)
            continue
        spec.scheduler_id = sid
        spec.status = "queued"
        store.update_batch_job(spec.id, scheduler_id=sid, status="queued")
        submitted.append(spec)
    return submitted


def reconcile(project, platform) -> list:
    """Correct drift between the store's batch jobs and the real queue."""
    store = project.store
    actions = []
    for row in store.list_batch_jobs(statuses=("queued", "running")):
        status = platform.status(row["scheduler_id"])
        job_id = row["id"]
        if status == "vanished":
            n = _untag_unstarted(store, job_id)
            store.update_batch_job(job_id, status="vanished")
            actions.append(("vanished", job_id, n))
        elif status == "finished":
            n = _untag_unstarted(store, job_id)
            store.update_batch_job(job_id, status="finished")
            actions.append(("finished", job_id, n))
        elif status != row["status"]:
            store.update_batch_job(job_id, status=status)
            actions.append((status, job_id, 0))
    return actions


def _untag_unstarted(store: Store, batch_tag: str) -> int:
    tagged = store.query(TaskFilter(batch_tag=batch_tag))
    victims = [t.id for t in tagged if t.state in _UNSTARTED]
    store.tag_tasks(victims, None)
    for tid in victims:
        store.release_task(tid)
    return len(victims)


class Service:
    """Single background scheduler process for one project store."""

    def __init__(self, project, platform, policy=None,
                 cycle_seconds=DEFAULT_CYCLE_SECONDS, owner=None):
        self.project = project
        self.platform = platform
        self.policy = policy or load_policy(project.policy_path)
        self.cycle = cycle_seconds
        self.owner = owner or f"service-{uuid.uuid4().hex[:8]}"
        self._stop = False

    def run_cycle(self, dry_run=False) -> list:
        if not self.project.store.acquire_service_lock(
            self.owner, ttl=max(60.0, 3 * self.cycle)
        ):
            raise SubmitFailure("another service owns this project store")
        reconcile(self.project, self.platform)
        return submit_cycle(self.project, self.policy, self.platform, dry_run)

    def stop(self, *_args):
        self._stop = True

    def run(self, once=False, dry_run=False) -> list:
        specs = []
        try:
            while not self._stop:
                specs = self.run_cycle(dry_run=dry_run)
                if once or dry_run:
                    break
                time.sleep(self.cycle)
        finally:
            self.project.store.release_service_lock(self.owner)
        return specs
