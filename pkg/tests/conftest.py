import pytest

from pilotgrid.model import AppDefinition, new_task
from pilotgrid.project import init_project


@pytest.fixture
def project(tmp_path):
    return init_project(tmp_path / "proj")


@pytest.fixture
def store(project):
    return project.store


@pytest.fixture
def app(store):
    """A registered no-op application."""
    defn = AppDefinition(name="noop", executable="true")
    store.register_app(defn)
    return defn


def make_task(store, name="t", workflow="wf", application="noop", **fields):
    task = new_task(name, workflow, application, **fields)
    store.insert([task])
    return task
