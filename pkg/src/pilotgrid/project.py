"""Project directory layout and activation.

A project is a directory holding the task store, logs, task working
directories, the queue policy file, and launch/batch templates::

    <project>/store/      data + journal
    <project>/log/
    <project>/data/<workflow>/<name>_<id8>/
    <project>/policy.json
    <project>/templates/*.tmpl

The active project is selected with the PILOTGRID_DB_PATH environment
variable.
"""

from __future__ import annotations

import importlib.resources
import os
from pathlib import Path

from .errors import AlreadyExists, StoreUnreachable
from .store import Store

ENV_DB_PATH = "PILOTGRID_DB_PATH"

_TEMPLATE_NAMES = ("mpirun.tmpl", "aprun.tmpl", "srun.tmpl", "batch_job.tmpl")

_DEFAULT_POLICY = """\
[
  {
    "queue_name": "default",
    "max_queued": 1,
    "ranges": [
      {"nodes": [1, 8], "walltime_hours": [0.1, 1.0]}
    ]
  }
]
"""


class Project:
    def __init__(self, path):
        self.path = Path(path)
        self._store = None

    @property
    def store_dir(self) -> Path:
        return self.path / "store"

    @property
    def log_dir(self) -> Path:
        return self.path / "log"

    @property
    def data_dir(self) -> Path:
        return self.path / "data"

    @property
    def policy_path(self) -> Path:
        return self.path / "policy.json"

    @property
    def template_dir(self) -> Path:
        return self.path / "templates"

    @property
    def store(self) -> Store:
        if self._store is None:
            self._store = Store(self.store_dir)
        return self._store

    def work_dir_for(self, task) -> Path:
        return self.data_dir / task.workflow / f"{task.name}_{task.id[:8]}"

    def dispatch_log_path(self) -> Path:
        return self.log_dir / "dispatch.log"


def init_project(path) -> Project:
    """Create a new project directory with store, policy, and templates."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise AlreadyExists(f"{path} exists and is not empty")
    proj = Project(path)
    for d in (proj.store_dir, proj.log_dir, proj.data_dir, proj.template_dir):
        d.mkdir(parents=True, exist_ok=True)
    proj.policy_path.write_text(_DEFAULT_POLICY)
    pkg_templates = importlib.resources.files("pilotgrid") / "templates"
    for name in _TEMPLATE_NAMES:
        (proj.template_dir / name).write_text(
            (pkg_templates / name).read_text()
        )
    proj.store  # create the database
    return proj


def find_project(path=None) -> Project:
    """Resolve the active project from an explicit path or the environment."""
    path = path or os.environ.get(ENV_DB_PATH)
    if not path:
        raise StoreUnreachable(
            f"no active project: set {ENV_DB_PATH} or pass a project path"
        )
    proj = Project(path)
    if not proj.store_dir.is_dir():
        raise StoreUnreachable(f"{path} is not a pilotgrid project (no store/)")
    return proj
