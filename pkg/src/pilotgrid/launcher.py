"""The pilot executor.

Detects its allocation, leases tasks from the store, drives the
stage-in / preprocess / run / postprocess / stage-out pipeline with a
small worker pool, maps runnable tasks onto idle node slots
(first-fit descending), and survives faults: a nonzero exit, a killed
task, or a hard launcher crash never corrupts the stored workflow.

One coordinator thread owns the store handle and commits all updates;
transition workers do file and subprocess work only and report results
back through futures.
"""

from __future__ import annotations

import glob
import json
import os
import shutil
import signal
import subprocess
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import dag, model, platforms
from .errors import IllegalTransition, PilotGridError
from .model import Task, TaskState
from .platforms import JOB_MODE_MPI, JOB_MODE_SERIAL, NodeSet
from .project import ENV_DB_PATH, Project
from .store import UNSET, TaskFilter

ENV_JOB_ID = "PILOTGRID_JOB_ID"
ENV_JOB_STATE = "PILOTGRID_JOB_STATE"
ENV_JOB_NAME = "PILOTGRID_JOB_NAME"
ENV_WORKFLOW = "PILOTGRID_WORKFLOW"
ENV_EXIT_CODE = "PILOTGRID_EXIT_CODE"
ENV_LEASE = "PILOTGRID_LEASE_SECONDS"
ENV_KILL_GRACE = "PILOTGRID_KILL_GRACE_SECONDS"

DEFAULT_CYCLE_SECONDS = 1.0
DEFAULT_WORKERS = 4
DEFAULT_KILL_GRACE = 10.0
AGING_CYCLES = 5  # a task deferred this long blocks smaller leapfrogging tasks
IDLE_CYCLES_BEFORE_EXIT = 3

# Pipeline stages keyed by the state a task must be in to enter them.
_STAGE_FOR_STATE = {
    TaskState.READY: "stage_in",
    TaskState.RESTART_READY: "stage_in",
    TaskState.STAGED_IN: "preprocess",
    TaskState.RUN_DONE: "postprocess",
    TaskState.POSTPROCESSED: "stage_out",
}

_ACQUIRABLE_STATES = {
    TaskState.READY,
    TaskState.RESTART_READY,
    TaskState.STAGED_IN,
    TaskState.PREPROCESSED,
    TaskState.RUNNING,
    TaskState.RUN_DONE,
    TaskState.POSTPROCESSED,
    TaskState.STAGED_OUT,
}


@dataclass(frozen=True)
class Assignment:
    task_id: str
    nodes: tuple
    slots_per_node: int = 1


@dataclass
class _Running:
    task: Task
    proc: subprocess.Popen
    nodes: tuple
    packing: int
    out_path: Path
    err_path: Path
    started: float
    kill_deadline: float | None = None
    timed_out: bool = False


@dataclass
class _TransitionResult:
    task_id: str
    events: list  # of (TaskState, message, datetime)
    fields: dict = field(default_factory=dict)


def detect_resources(environ, platform) -> NodeSet:
    """Node list and remaining walltime per the adapter's convention."""
    return platform.detect_environment(environ)


def plan_assignments(runnable, idle, mode, remaining_walltime=float("inf"),
                     wait_counts=None) -> list:
    """First-fit-descending mapping of runnable tasks onto idle capacity.

    ``idle`` is a dict node_id -> free fraction (1.0 = fully idle).
    Tasks are taken in descending node count (ties: older creation
    first, which is the order of ``runnable``); each gets the first
    block of nodes that fits. A task whose walltime estimate exceeds
    the remaining allocation is skipped. Once a task that has waited
    >= AGING_CYCLES cannot be placed, no smaller task overtakes it.
    """
    wait_counts = wait_counts or {}
    idle = dict(idle)
    order = sorted(
        range(len(runnable)), key=lambda i: (-runnable[i].num_nodes, i)
    )
    out = []
    for i in order:
        task = runnable[i]
        if task.wall_time_minutes * 60.0 > remaining_walltime:
            continue
        if mode == JOB_MODE_SERIAL:
            need = 1.0 / task.node_packing_count
            home = next(
                (n for n in sorted(idle) if idle[n] + 1e-9 >= need), None
            )
            if home is None:
                if wait_counts.get(task.id, 0) >= AGING_CYCLES:
                    break
                continue
            idle[home] -= need
            out.append(Assignment(task.id, (home,)))
        else:
            free = [n for n in sorted(idle) if idle[n] >= 1.0 - 1e-9]
            if len(free) < task.num_nodes:
                if wait_counts.get(task.id, 0) >= AGING_CYCLES:
                    break
                continue
            chosen = tuple(free[: task.num_nodes])
            for n in chosen:
                idle[n] = 0.0
            out.append(Assignment(task.id, chosen))
    return out


def handle_exit(task: Task, app, exit_kind: str, exit_code: int | None,
                stderr_tail: str = "") -> list:
    """Map a finished run onto its outcome events.

    exit_kind is one of code | signalled | timeout | killed. Returns the
    event chain to record, e.g. RUN_ERROR followed by the error-policy
    verdict. For the "handler" policy, only the RUN_ERROR / RUN_TIMEOUT
    event is returned; the postprocess hook decides the rest.
    """
    now = model.utcnow()
    if exit_kind == "code" and exit_code == 0:
        return [(TaskState.RUN_DONE, "", now)]
    if exit_kind == "killed":
        return [(TaskState.USER_KILLED, "killed by user", now)]
    if exit_kind == "timeout":
        first = (TaskState.RUN_TIMEOUT, "launcher walltime expired mid-run", now)
    elif exit_kind == "signalled":
        first = (
            TaskState.RUN_ERROR,
            model.tail_bytes(f"terminated by signal {exit_code}; stderr tail: {stderr_tail}"),
            now,
        )
    else:
        first = (
            TaskState.RUN_ERROR,
            model.tail_bytes(f"exit code {exit_code}; stderr tail: {stderr_tail}"),
            now,
        )
    kind, _ = model.parse_error_policy(app.error_policy)
    if kind == "handler":
        return [first]
    prior = 1 + sum(
        1
        for ev in task.state_history
        if ev.state in (TaskState.RUN_ERROR, TaskState.RUN_TIMEOUT)
    )
    verdict = model.resolve_error_policy(app.error_policy, first[0], prior)
    reason = (
        "will restart" if verdict == TaskState.RESTART_READY
        else f"error policy {app.error_policy}"
    )
    return [first, (verdict, reason, now)]


def hook_environment(project: Project, task: Task, exit_code=None) -> dict:
    env = os.environ.copy()
    env.update({k: str(v) for k, v in task.environment.items()})
    env[ENV_JOB_ID] = task.id
    env[ENV_JOB_STATE] = task.state.value
    env[ENV_JOB_NAME] = task.name
    env[ENV_WORKFLOW] = task.workflow
    env[ENV_DB_PATH] = str(project.path)
    if exit_code is not None:
        env[ENV_EXIT_CODE] = str(exit_code)
    return env


# -- transition workers (run on pool threads; file/subprocess work only) ----

def _copy_sources(sources, work_dir: Path):
    for src in sources:
        matches = glob.glob(str(Path(src).expanduser())) or [src]
        for m in matches:
            p = Path(m)
            if not p.exists():
                raise FileNotFoundError(f"stage-in source {m} not found")
            if p.is_dir():
                shutil.copytree(p, work_dir / p.name, dirs_exist_ok=True)
            else:
                shutil.copy2(p, work_dir / p.name)


def _materialize_inputs(pairs, work_dir: Path):
    for src, dest_name in pairs:
        dest = work_dir / dest_name
        if dest.exists():
            continue
        try:
            os.symlink(os.path.abspath(src), dest)
        except OSError:
            shutil.copy2(src, dest)


def transition_stage_in(project, task: Task, parents) -> _TransitionResult:
    work_dir = project.work_dir_for(task)
    try:
        work_dir.mkdir(parents=True, exist_ok=True)
        _copy_sources(task.stage_in_sources, work_dir)
        pairs = dag.resolve_inputs(task, parents)
        _materialize_inputs(pairs, work_dir)
    except (OSError, PilotGridError) as exc:
        return _TransitionResult(
            task.id,
            [(TaskState.FAILED, f"stage-in failed: {exc}", model.utcnow())],
        )
    return _TransitionResult(
        task.id,
        [(TaskState.STAGED_IN, f"staged into {work_dir}", model.utcnow())],
        fields={"work_dir": str(work_dir)},
    )


def _run_hook(project, task, hook, ok_state, exit_code=None):
    if not hook:
        return _TransitionResult(task.id, [(ok_state, "", model.utcnow())])
    proc = subprocess.run(
        hook,
        shell=True,
        cwd=task.work_dir or None,
        env=hook_environment(project, task, exit_code),
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        msg = model.tail_bytes(
            f"hook exit code {proc.returncode}; stderr tail: {proc.stderr}"
        )
        return _TransitionResult(task.id, [(TaskState.FAILED, msg, model.utcnow())])
    return _TransitionResult(
        task.id, [(ok_state, f"hook ok: {hook}", model.utcnow())]
    )


def transition_preprocess(project, task: Task, app) -> _TransitionResult:
    return _run_hook(project, task, app.preprocess, TaskState.PREPROCESSED)


def transition_postprocess(project, task: Task, app, exit_code=None) -> _TransitionResult:
    return _run_hook(
        project, task, app.postprocess, TaskState.POSTPROCESSED, exit_code
    )


def transition_stage_out(project, task: Task) -> _TransitionResult:
    now = model.utcnow()
    try:
        patterns = task.stage_out_patterns.split()
        if patterns and task.stage_out_dest:
            dest = Path(task.stage_out_dest).expanduser()
            dest.mkdir(parents=True, exist_ok=True)
            for pat in patterns:
                for m in glob.glob(str(Path(task.work_dir) / pat)):
                    shutil.copy2(m, dest / Path(m).name)
    except OSError as exc:
        return _TransitionResult(
            task.id, [(TaskState.FAILED, f"stage-out failed: {exc}", now)]
        )
    return _TransitionResult(
        task.id,
        [(TaskState.STAGED_OUT, "", now), (TaskState.JOB_FINISHED, "", now)],
    )


class Launcher:
    """Coordinator for one pilot allocation."""

    def __init__(self, project: Project, platform=None, job_mode=JOB_MODE_SERIAL,
                 batch_tag=None, wf_filter=None, time_limit_min=None,
                 workers=DEFAULT_WORKERS, cycle_seconds=DEFAULT_CYCLE_SECONDS,
                 launch_template=None, owner=None):
        self.project = project
        self.store = project.store
        self.platform = platform or platforms.auto_adapter()
        self.job_mode = job_mode
        self.batch_tag = batch_tag
        self.wf_filter = wf_filter
        self.time_limit_min = time_limit_min
        self.workers = workers
        self.cycle = cycle_seconds
        self.owner = owner or f"launcher-{uuid.uuid4().hex[:8]}"
        self.lease_seconds = float(os.environ.get(ENV_LEASE, "120"))
        self.kill_grace = float(os.environ.get(ENV_KILL_GRACE, DEFAULT_KILL_GRACE))
        self.launch_template = launch_template
        self._stop = threading.Event()

        self.tasks: dict[str, Task] = {}  # leased, mid-pipeline
        self.apps: dict[str, model.AppDefinition] = {}
        self.running: dict[str, _Running] = {}
        self.in_transition: dict[str, object] = {}  # task_id -> Future
        self.pending: list = []  # (id, state, message, at) awaiting commit
        self.wait_counts: dict[str, int] = {}
        self._ignored: set[str] = set()
        self.node_idle: dict[str, float] = {}
        self.dispatch_count = 0
        self.finished_count = 0

    # -- helpers -----------------------------------------------------------

    def _app(self, name):
        if name not in self.apps:
            self.apps[name] = self.store.get_app(name)
        return self.apps[name]

    def _local_advance(self, task_id, events):
        for to, message, at in events:
            self.pending.append((task_id, to, message, at))
            t = self.tasks[task_id]
            self.tasks[task_id] = model.advance(t, to, message, at)

    def _log_dispatch(self, task_id, nodes):
        line = json.dumps(
            {
                "ts": time.time(),
                "owner": self.owner,
                "task_id": task_id,
                "nodes": list(nodes),
            }
        )
        with open(self.project.dispatch_log_path(), "a") as fh:
            fh.write(line + "\n")

    def _flush(self):
        """Commit pending events in one batch; fall back to per-event
        application when another process moved a task under us."""
        if not self.pending:
            return
        batch, self.pending = self.pending, []
        try:
            self.store.update_batch(batch)
        except IllegalTransition:
            for change in batch:
                try:
                    self.store.update_batch([change])
                except IllegalTransition:
                    self._drop_conflicting(change[0])
        for task_id, to, _, _ in batch:
            if to in model.TERMINAL_STATES:
                self._on_terminal(task_id)

    def _drop_conflicting(self, task_id):
        """A task changed state externally (typically a kill): resync."""
        stored = self.store.get(task_id)
        self.tasks.pop(task_id, None)
        run = self.running.get(task_id)
        if stored.state == TaskState.USER_KILLED and run:
            self._signal_kill(run)
        elif stored.state not in model.TERMINAL_STATES:
            self.store.release_task(task_id)

    def _on_terminal(self, task_id):
        self.tasks.pop(task_id, None)
        self.wait_counts.pop(task_id, None)
        self.store.release_task(task_id)
        dag.on_parent_terminal(self.store, task_id)
        self.finished_count += 1

    # -- acquisition -------------------------------------------------------

    def _acquire_filter(self):
        return TaskFilter(
            states=set(_ACQUIRABLE_STATES),
            workflow=self.wf_filter,
            batch_tag=self.batch_tag if self.batch_tag else UNSET,
        )

    def _acquire(self):
        capacity = max(4, 4 * len(self.node_idle) + 8)
        headroom = capacity - len(self.tasks) - len(self.running)
        if headroom <= 0:
            return
        got = self.store.acquire(
            self._acquire_filter(), headroom, self.owner, self.lease_seconds
        )
        for task in got:
            if (
                task.id in self.tasks
                or task.id in self.running
                or task.id in self._ignored
            ):
                continue
            if self.job_mode == JOB_MODE_SERIAL and (
                task.num_nodes > 1 or task.ranks_per_node > 1
            ):
                self._ignored.add(task.id)  # not runnable in this mode
                self.store.release_task(task.id)
                continue
            if task.state == TaskState.RUNNING:
                # Stale lease from a crashed launcher: record the timeout
                # and route it through the error policy.
                app = self._app(task.application)
                self.tasks[task.id] = task
                self._local_advance(
                    task.id, handle_exit(task, app, "timeout", None)
                )
            else:
                self.tasks[task.id] = task

    # -- pipeline ----------------------------------------------------------

    def _submit_transitions(self, pool):
        for task_id, task in list(self.tasks.items()):
            if task_id in self.in_transition or task_id in self.running:
                continue
            app = self._app(task.application)
            stage = _STAGE_FOR_STATE.get(task.state)
            if stage is None and task.state in (
                TaskState.RUN_ERROR, TaskState.RUN_TIMEOUT
            ):
                # handler policy: the postprocess hook sees the error
                # context and its exit status picks restart vs failure.
                stage = "postprocess"
            if task.state == TaskState.STAGED_OUT:
                self._local_advance(
                    task_id, [(TaskState.JOB_FINISHED, "", model.utcnow())]
                )
                continue
            if stage is None:
                continue
            if stage == "stage_in":
                parents = [self.store.get(p) for p in self.store.parents_of(task_id)]
                fut = pool.submit(transition_stage_in, self.project, task, parents)
            elif stage == "preprocess":
                fut = pool.submit(transition_preprocess, self.project, task, app)
            elif stage == "postprocess":
                code = _last_exit_code(task)
                fut = pool.submit(
                    transition_postprocess, self.project, task, app, code
                )
            else:
                fut = pool.submit(transition_stage_out, self.project, task)
            self.in_transition[task_id] = fut

    def _collect_transitions(self):
        done = [tid for tid, fut in self.in_transition.items() if fut.done()]
        for tid in done:
            fut = self.in_transition.pop(tid)
            res: _TransitionResult = fut.result()
            if tid not in self.tasks:
                continue
            if res.fields:
                self.store.update_fields(tid, **res.fields)
                self.tasks[tid] = _with_fields(self.tasks[tid], res.fields)
            task = self.tasks[tid]
            if (
                task.state in (TaskState.RUN_ERROR, TaskState.RUN_TIMEOUT)
                and res.events
            ):
                # handler-policy verdict: the hook ran with the error
                # context; unless it moved the task itself, its exit
                # status decides restart vs failure.
                ok = res.events[-1][0] != TaskState.FAILED
                verdict = TaskState.RESTART_READY if ok else TaskState.FAILED
                self._local_advance(
                    tid, [(verdict, "error handler verdict", model.utcnow())]
                )
            else:
                self._local_advance(tid, res.events)

    # -- dispatch and reaping ---------------------------------------------

    def _runnable(self):
        ready = [
            t for t in self.tasks.values()
            if t.state == TaskState.PREPROCESSED
            and t.id not in self.running
            and t.id not in self.in_transition
        ]
        ready.sort(key=lambda t: (t.state_history[0].timestamp, t.id))
        return ready

    def _dispatch(self, assignment: Assignment):
        task = self.tasks[assignment.task_id]
        app = self._app(task.application)
        template = None
        if self.job_mode == JOB_MODE_MPI:
            templates = platforms.load_templates(self.project.template_dir)
            name = self.launch_template or "mpirun"
            if name not in templates:
                raise platforms.UnknownTemplate(name)
            template = templates[name]
        cmd = platforms.render_launch_command(task, app.executable, template, self.job_mode)
        work_dir = Path(task.work_dir or self.project.work_dir_for(task))
        work_dir.mkdir(parents=True, exist_ok=True)
        out_path, err_path = work_dir / "job.out", work_dir / "job.err"
        env = hook_environment(self.project, task)
        try:
            with open(out_path, "wb") as out, open(err_path, "wb") as err:
                proc = subprocess.Popen(
                    cmd, shell=True, cwd=work_dir, env=env,
                    stdout=out, stderr=err, start_new_session=True,
                )
        except OSError as exc:
            self._local_advance(
                task.id,
                [(TaskState.RUNNING, cmd, model.utcnow())]
                + handle_exit(task, app, "code", 127, f"spawn failure: {exc}"),
            )
            return
        now = model.utcnow()
        self._local_advance(task.id, [(TaskState.RUNNING, cmd, now)])
        self.running[task.id] = _Running(
            task=self.tasks[task.id], proc=proc, nodes=assignment.nodes,
            packing=task.node_packing_count, out_path=out_path,
            err_path=err_path, started=time.time(),
        )
        for n in assignment.nodes:
            if self.job_mode == JOB_MODE_SERIAL:
                self.node_idle[n] -= 1.0 / task.node_packing_count
            else:
                self.node_idle[n] = 0.0
        self._log_dispatch(task.id, assignment.nodes)
        self.dispatch_count += 1
        self.wait_counts.pop(task.id, None)

    def _free_nodes(self, run: _Running):
        for n in run.nodes:
            if self.job_mode == JOB_MODE_SERIAL:
                self.node_idle[n] = min(1.0, self.node_idle[n] + 1.0 / run.packing)
            else:
                self.node_idle[n] = 1.0

    def _stderr_tail(self, run: _Running) -> str:
        try:
            return model.tail_bytes(
                run.err_path.read_text(errors="replace"), 512
            )
        except OSError:
            return ""

    def _reap(self):
        for tid, run in list(self.running.items()):
            code = run.proc.poll()
            if code is None:
                if run.kill_deadline and time.time() > run.kill_deadline:
                    _kill_group(run.proc, signal.SIGKILL)
                continue
            del self.running[tid]
            self._free_nodes(run)
            task = self.tasks.get(tid)
            if task is None or task.state != TaskState.RUNNING:
                continue
            app = self._app(task.application)
            stored_state = self.store.get(tid).state
            if stored_state == TaskState.USER_KILLED or run.kill_deadline:
                # dag.kill already recorded USER_KILLED; nothing to append.
                self.tasks.pop(tid, None)
                self._on_terminal_killed(tid)
                continue
            if run.timed_out:
                events = handle_exit(task, app, "timeout", None)
            elif code < 0:
                events = handle_exit(task, app, "signalled", -code, self._stderr_tail(run))
            else:
                events = handle_exit(
                    task, app, "code", code,
                    self._stderr_tail(run) if code != 0 else "",
                )
            self._local_advance(tid, events)

    def _on_terminal_killed(self, task_id):
        self.store.release_task(task_id)
        dag.on_parent_terminal(self.store, task_id)

    def _signal_kill(self, run: _Running):
        if run.kill_deadline is None:
            _kill_group(run.proc, signal.SIGTERM)
            run.kill_deadline = time.time() + self.kill_grace

    def _check_kills(self):
        if not self.running:
            return
        flt = TaskFilter(ids=set(self.running))
        stored = {t.id: t.state for t in self.store.query(flt)}
        for tid, state in stored.items():
            if state == TaskState.USER_KILLED:
                self._signal_kill(self.running[tid])
        # Tasks killed before they reached dispatch:
        for tid, task in list(self.tasks.items()):
            if tid in self.running or tid in self.in_transition:
                continue
            if self.store.get(tid).state == TaskState.USER_KILLED:
                self.tasks.pop(tid)
                self.store.release_task(tid)

    # -- main loop ---------------------------------------------------------

    def stop(self, *_args):
        self._stop.set()

    def run(self) -> dict:
        """Cycle until no acquirable work remains or the walltime margin hits."""
        nodeset = detect_resources(os.environ, self.platform)
        if self.time_limit_min is not None:
            remaining = min(nodeset.remaining_walltime, self.time_limit_min * 60.0)
        else:
            remaining = nodeset.remaining_walltime
        deadline = time.time() + remaining if remaining != float("inf") else None
        self.node_idle = {n.id: 1.0 for n in nodeset.nodes}

        pool = ThreadPoolExecutor(max_workers=self.workers)
        idle_cycles = 0
        last_cycle = 0.0
        tick = min(0.1, self.cycle)
        try:
            while not self._stop.is_set():
                now = time.time()
                if deadline and now >= deadline:
                    self._timeout_running()
                    break
                full_cycle = (now - last_cycle) >= self.cycle
                if full_cycle:
                    last_cycle = now
                    self.store.renew_or_release(self.owner, renew=True)
                    dag.classify_created(self.store)
                    dag.refresh_readiness(self.store)
                    self._acquire()
                    self._check_kills()
                    for t in self._runnable():
                        self.wait_counts[t.id] = self.wait_counts.get(t.id, 0)
                self._collect_transitions()
                self._submit_transitions(pool)
                self._reap()
                remaining_s = (deadline - now) if deadline else float("inf")
                if remaining_s >= 2 * self.cycle:
                    self._flush()  # dispatch needs committed PREPROCESSED rows
                    planned = plan_assignments(
                        self._runnable(), self.node_idle, self.job_mode,
                        remaining_s, self.wait_counts,
                    )
                    assigned = {a.task_id for a in planned}
                    for a in planned:
                        self._dispatch(a)
                    if full_cycle:
                        for t in self._runnable():
                            if t.id not in assigned:
                                self.wait_counts[t.id] = (
                                    self.wait_counts.get(t.id, 0) + 1
                                )
                self._flush()
                if full_cycle:
                    if not self.tasks and not self.running and not self.in_transition:
                        idle_cycles += 1
                        if idle_cycles >= IDLE_CYCLES_BEFORE_EXIT:
                            break
                    else:
                        idle_cycles = 0
                time.sleep(tick)
            if self._stop.is_set():
                self._timeout_running()
        finally:
            self._flush()
            pool.shutdown(wait=False, cancel_futures=True)
            self.store.renew_or_release(self.owner, renew=False)
        return {
            "owner": self.owner,
            "dispatched": self.dispatch_count,
            "finished": self.finished_count,
        }

    def _timeout_running(self):
        """Graceful shutdown: running work becomes RUN_TIMEOUT."""
        for tid, run in list(self.running.items()):
            if run.proc.poll() is None:
                _kill_group(run.proc, signal.SIGTERM)
                run.timed_out = True
        t0 = time.time()
        while self.running and time.time() - t0 < 5.0:
            self._reap()
            time.sleep(0.05)
        for tid, run in list(self.running.items()):
            _kill_group(run.proc, signal.SIGKILL)
            run.timed_out = True
        t0 = time.time()
        while self.running and time.time() - t0 < 5.0:
            self._reap()
            time.sleep(0.05)
        self._flush()


def _kill_group(proc, sig):
    try:
        os.killpg(os.getpgid(proc.pid), sig)
    except (ProcessLookupError, PermissionError):
        try:
            proc.send_signal(sig)
        except ProcessLookupError:
            pass


def _last_exit_code(task: Task):
    for ev in reversed(task.state_history):
        if ev.state in (TaskState.RUN_DONE, TaskState.RUN_ERROR, TaskState.RUN_TIMEOUT):
            if ev.state == TaskState.RUN_DONE:
                return 0
            msg = ev.message
            if "exit code" in msg:
                try:
                    return int(msg.split("exit code")[1].split(";")[0].strip())
                except ValueError:
                    return 1
            return 1
    return None


def _with_fields(task: Task, fields: dict) -> Task:
    from dataclasses import replace

    return replace(task, **fields)
