"""Platform boundary: scheduler clients, launch templates, node detection.

Ships a fully functional local platform (virtual nodes, host
subprocesses) and an in-process mock batch scheduler for desk-scale
operation and testing. Real-site adapters (Cobalt, Slurm, PBS) shell out
to the locally installed client binaries and are exercised only where
those exist.
"""

from __future__ import annotations

import os
import shlex
import string
import subprocess
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MissingEnvironment, UnboundPlaceholder, UnknownTemplate
from .model import Task

ENV_LOCAL_NODES = "PILOTGRID_LOCAL_NODES"
ENV_NODEFILE = "PILOTGRID_NODEFILE"
ENV_TIME_LIMIT = "PILOTGRID_TIME_LIMIT_MIN"

JOB_MODE_SERIAL = "serial"
JOB_MODE_MPI = "mpi"


@dataclass(frozen=True)
class NodeSpec:
    id: str
    capacity_slots: int = 1


@dataclass
class NodeSet:
    nodes: list
    remaining_walltime: float  # seconds

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True)
class LaunchTemplate:
    """Command pattern with {nprocs} {ranks_per_node} {num_nodes} {env_flags} {exe} {args}."""

    name: str
    pattern: str


def load_templates(template_dir) -> dict:
    out = {}
    for path in sorted(Path(template_dir).glob("*.tmpl")):
        if path.stem == "batch_job":
            continue
        out[path.stem] = LaunchTemplate(path.stem, path.read_text().strip())
    return out


def render_launch_command(task: Task, exe: str, template: LaunchTemplate | None,
                          mode: str) -> str:
    """Render the shell command that runs one task.

    Serial mode forks the executable directly with no wrapper; mpi mode
    substitutes the task's geometry into the site's launch template.
    """
    if mode == JOB_MODE_SERIAL:
        return f"{exe} {task.args}".strip()
    if mode != JOB_MODE_MPI:
        raise ValueError(f"unknown job mode {mode!r}")
    if template is None:
        raise UnknownTemplate("mpi job mode requires a launch template")
    env_flags = " ".join(
        f"-x {shlex.quote(k)}" for k in sorted(task.environment)
    )
    values = {
        "nprocs": task.num_nodes * task.ranks_per_node,
        "ranks_per_node": task.ranks_per_node,
        "num_nodes": task.num_nodes,
        "env_flags": env_flags,
        "exe": exe,
        "args": task.args,
    }
    try:
        cmd = template.pattern.format(**values)
    except KeyError as exc:
        raise UnboundPlaceholder(f"template {template.name}: {exc}") from exc
    # A placeholder the pattern never names is fine; one it names but we
    # do not bind is not.
    for _, name, _, _ in string.Formatter().parse(template.pattern):
        if name and name not in values:
            raise UnboundPlaceholder(f"template {template.name}: {{{name}}}")
    return " ".join(cmd.split())


class SchedulerAdapter:
    """Interface to a batch scheduler plus job-environment detection."""

    name = "base"

    def submit(self, script_path: str, spec) -> str:
        raise NotImplementedError

    def status(self, scheduler_id: str) -> str:
        """One of queued | running | finished | vanished."""
        raise NotImplementedError

    def delete(self, scheduler_id: str) -> None:
        raise NotImplementedError

    def detect_environment(self, environ=None) -> NodeSet:
        raise NotImplementedError


def _time_limit_seconds(environ) -> float:
    raw = environ.get(ENV_TIME_LIMIT)
    return float(raw) * 60.0 if raw else float("inf")


class LocalAdapter(SchedulerAdapter):
    """Desk-scale stand-in: virtual nodes, tasks run as host subprocesses.

    submit() runs the batch script immediately as a child process, so the
    local "queue" has no waiting state beyond process startup.
    """

    name = "local"

    def __init__(self):
        self._procs = {}

    def detect_environment(self, environ=None) -> NodeSet:
        environ = environ if environ is not None else os.environ
        raw = environ.get(ENV_LOCAL_NODES)
        if not raw:
            raise MissingEnvironment(f"{ENV_LOCAL_NODES} is not set")
        n = int(raw)
        return NodeSet(
            nodes=[NodeSpec(f"vnode{i:03d}") for i in range(n)],
            remaining_walltime=_time_limit_seconds(environ),
        )

    def submit(self, script_path, spec) -> str:
        sid = f"local-{uuid.uuid4().hex[:8]}"
        env = os.environ.copy()
        env[ENV_LOCAL_NODES] = str(spec.num_nodes)
        env[ENV_TIME_LIMIT] = str(spec.walltime_minutes)
        self._procs[sid] = subprocess.Popen(
            ["/bin/sh", script_path], env=env,
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
        )
        return sid

    def status(self, scheduler_id) -> str:
        proc = self._procs.get(scheduler_id)
        if proc is None:
            return "vanished"
        return "running" if proc.poll() is None else "finished"

    def delete(self, scheduler_id) -> None:
        proc = self._procs.pop(scheduler_id, None)
        if proc and proc.poll() is None:
            proc.terminate()


class NodefileAdapter(SchedulerAdapter):
    """Environment convention used inside mock-scheduler allocations:
    PILOTGRID_NODEFILE lists one node id per line."""

    name = "nodefile"

    def detect_environment(self, environ=None) -> NodeSet:
        environ = environ if environ is not None else os.environ
        nodefile = environ.get(ENV_NODEFILE)
        if not nodefile or not Path(nodefile).is_file():
            raise MissingEnvironment(f"{ENV_NODEFILE} is not set or missing")
        nodes = [
            NodeSpec(line.strip())
            for line in Path(nodefile).read_text().splitlines()
            if line.strip()
        ]
        return NodeSet(nodes=nodes, remaining_walltime=_time_limit_seconds(environ))

    def submit(self, script_path, spec) -> str:
        raise NotImplementedError("nodefile adapter cannot submit")

    def status(self, scheduler_id) -> str:
        raise NotImplementedError

    def delete(self, scheduler_id) -> None:
        raise NotImplementedError


@dataclass
class _MockJob:
    scheduler_id: str
    script_path: str
    num_nodes: int
    walltime_minutes: float
    status: str = "queued"
    proc: subprocess.Popen | None = None
    nodefile: str = ""
    extra_env: dict = field(default_factory=dict)


class MockScheduler(SchedulerAdapter):
    """In-process batch scheduler with a fixed node pool and FIFO start.

    Submitted scripts really execute as child processes, with the
    nodefile environment convention set, so an end-to-end service ->
    batch job -> launcher flow runs inside one test process. delete()
    models external qdel: a queued job vanishes, a running one is
    terminated.
    """

    name = "mock"

    def __init__(self, node_pool: int, clock=time.monotonic, env=None):
        if node_pool <= 0:
            raise ValueError("node_pool must be positive")
        self.node_pool = node_pool
        self.clock = clock
        self.extra_env = dict(env or {})
        self._jobs: dict[str, _MockJob] = {}
        self._order: list[str] = []
        self._mutex = threading.Lock()

    def submit(self, script_path, spec) -> str:
        sid = f"mock-{len(self._order) + 1:04d}"
        with self._mutex:
            self._jobs[sid] = _MockJob(
                sid, str(script_path), spec.num_nodes, spec.walltime_minutes
            )
            self._order.append(sid)
        self.tick()
        return sid

    def _nodes_in_use(self) -> int:
        return sum(j.num_nodes for j in self._jobs.values() if j.status == "running")

    def tick(self):
        """Reap finished jobs, then start queued jobs FIFO while the pool admits."""
        with self._mutex:
            for job in self._jobs.values():
                if job.status == "running" and job.proc.poll() is not None:
                    job.status = "finished"
            for sid in self._order:
                job = self._jobs[sid]
                if job.status != "queued":
                    continue
                if job.num_nodes > self.node_pool - self._nodes_in_use():
                    break  # strict FIFO: later jobs wait behind the head
                self._start(job)

    def _start(self, job: _MockJob):
        fd, nodefile = tempfile.mkstemp(prefix="pilotgrid-nodes-", suffix=".txt")
        with os.fdopen(fd, "w") as fh:
            for i in range(job.num_nodes):
                fh.write(f"{job.scheduler_id}-node{i:03d}\n")
        job.nodefile = nodefile
        env = os.environ.copy()
        env.update(self.extra_env)
        env[ENV_NODEFILE] = nodefile
        env[ENV_TIME_LIMIT] = str(job.walltime_minutes)
        job.proc = subprocess.Popen(
            ["/bin/sh", job.script_path], env=env,
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
        )
        job.status = "running"

    def status(self, scheduler_id) -> str:
        self.tick()
        job = self._jobs.get(scheduler_id)
        return job.status if job else "vanished"

    def delete(self, scheduler_id) -> None:
        with self._mutex:
            job = self._jobs.get(scheduler_id)
            if job is None:
                return
            if job.status == "running" and job.proc.poll() is None:
                job.proc.terminate()
            job.status = "vanished"

    def wait_all(self, timeout=60.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            self.tick()
            if all(
                j.status in ("finished", "vanished") for j in self._jobs.values()
            ):
                return True
            time.sleep(0.05)
        return False

    def detect_environment(self, environ=None) -> NodeSet:
        return NodefileAdapter().detect_environment(environ)


class ShellSchedulerAdapter(SchedulerAdapter):
    """Base for real-site adapters that shell out to client binaries."""

    submit_cmd: list = []
    status_cmd: list = []
    delete_cmd: list = []

    def _run(self, argv):
        return subprocess.run(argv, capture_output=True, text=True, check=True)

    def submit(self, script_path, spec) -> str:
        out = self._run(self.submit_cmd + [str(script_path)])
        return out.stdout.strip().split()[0]

    def delete(self, scheduler_id) -> None:
        self._run(self.delete_cmd + [scheduler_id])

    def detect_environment(self, environ=None) -> NodeSet:
        return NodefileAdapter().detect_environment(environ)


class SlurmAdapter(ShellSchedulerAdapter):
    name = "slurm"
    submit_cmd = ["sbatch", "--parsable"]
    delete_cmd = ["scancel"]

    def status(self, scheduler_id) -> str:
        try:
            out = self._run(["squeue", "-h", "-j", scheduler_id, "-o", "%T"])
        except subprocess.CalledProcessError:
            return "vanished"
        state = out.stdout.strip()
        if not state:
            return "finished"
        return "running" if state == "RUNNING" else "queued"


class PbsAdapter(ShellSchedulerAdapter):
    name = "pbs"
    submit_cmd = ["qsub"]
    delete_cmd = ["qdel"]

    def status(self, scheduler_id) -> str:
        try:
            out = self._run(["qstat", "-f", scheduler_id])
        except subprocess.CalledProcessError:
            return "vanished"
        for line in out.stdout.splitlines():
            if "job_state" in line:
                code = line.split("=")[-1].strip()
                return {"Q": "queued", "R": "running"}.get(code, "finished")
        return "finished"


class CobaltAdapter(ShellSchedulerAdapter):
    name = "cobalt"
    submit_cmd = ["qsub"]
    delete_cmd = ["qdel"]

    def status(self, scheduler_id) -> str:
        try:
            out = self._run(["qstat", scheduler_id])
        except subprocess.CalledProcessError:
            return "vanished"
        if "running" in out.stdout:
            return "running"
        return "queued" if scheduler_id in out.stdout else "finished"


ADAPTERS = {
    "local": LocalAdapter,
    "nodefile": NodefileAdapter,
    "slurm": SlurmAdapter,
    "pbs": PbsAdapter,
    "cobalt": CobaltAdapter,
}


def make_adapter(name: str) -> SchedulerAdapter:
    try:
        return ADAPTERS[name]()
    except KeyError:
        raise UnknownTemplate(f"unknown platform adapter {name!r}") from None


def auto_adapter(environ=None) -> SchedulerAdapter:
    """Pick the adapter matching the detected job environment."""
    environ = environ if environ is not None else os.environ
    if environ.get(ENV_NODEFILE):
        return NodefileAdapter()
    return LocalAdapter()
