"""Command surface: argument handling, listing format, exit codes."""

import uuid

import pytest

from conftest import make_task
from pilotgrid import model
from pilotgrid.cli import format_task_table, main
from pilotgrid.model import StateEvent, Task, TaskState
from pilotgrid.project import ENV_DB_PATH, Project
from pilotgrid.store import TaskFilter


@pytest.fixture
def cli_project(tmp_path, monkeypatch):
    path = tmp_path / "proj"
    assert main(["init", str(path)]) == 0
    monkeypatch.setenv(ENV_DB_PATH, str(path))
    return Project(path)


def out_of(capsys):
    return capsys.readouterr().out


class TestProjectCommands:
    def test_init_twice_fails(self, tmp_path, capsys):
        path = tmp_path / "p"
        assert main(["init", str(path)]) == 0
        assert main(["init", str(path)]) == 1

    def test_activate_prints_export(self, cli_project, capsys):
        capsys.readouterr()
        assert main(["activate", str(cli_project.path)]) == 0
        assert out_of(capsys).startswith(f"export {ENV_DB_PATH}=")

    def test_no_active_project(self, monkeypatch):
        monkeypatch.delenv(ENV_DB_PATH, raising=False)
        assert main(["ls"]) == 1


class TestAppAndJob:
    def test_app_then_job(self, cli_project, capsys):
        assert main(["app", "--name=run-sim", "--exec=/bin/sim.x"]) == 0
        capsys.readouterr()
        code = main([
            "job", "--name=task1", "--workflow=mini", "--application=run-sim",
        ])
        assert code == 0
        printed = out_of(capsys).strip()
        uuid.UUID(printed)  # the command prints the new task id
        t = cli_project.store.get(printed)
        assert (t.num_nodes, t.ranks_per_node, t.node_packing_count) == (1, 1, 1)

    def test_duplicate_app(self, cli_project):
        assert main(["app", "--name=a", "--exec=x"]) == 0
        assert main(["app", "--name=a", "--exec=x"]) == 1

    def test_job_bulk_add(self, cli_project):
        main(["app", "--name=a", "--exec=true"])
        for i in range(100):
            assert main([
                "job", f"--name=task{i}", "--workflow=mini", "--application=a",
            ]) == 0
        assert cli_project.store.count() == 100

    def test_job_flag_surface(self, cli_project):
        main(["app", "--name=a", "--exec=true"])
        assert main([
            "job", "--name=t", "--workflow=w", "--application=a",
            "--args=--level 2", "--env", "K=V", "--env", "J=W",
            "--num-nodes=2", "--ranks-per-node=4", "--wall-time-minutes=5",
            "--input-files=*.out", "--stage-in=/tmp/a", "--stage-in=/tmp/b",
            "--stage-out-patterns=*.h5", "--stage-out-dest=/tmp/res",
        ]) == 0
        t = cli_project.store.query()[0]
        assert t.environment == {"K": "V", "J": "W"}
        assert t.stage_in_sources == ("/tmp/a", "/tmp/b")

    def test_invalid_resource_combo(self, cli_project):
        main(["app", "--name=a", "--exec=true"])
        assert main([
            "job", "--name=t", "--workflow=w", "--application=a",
            "--num-nodes=4", "--node-packing-count=2",
        ]) == 1

    def test_unknown_application(self, cli_project):
        assert main(["job", "--name=t", "--workflow=w", "--application=ghost"]) == 1

    def test_unknown_flag_rejected(self, cli_project):
        assert main(["ls", "--frobnicate"]) == 1
        assert main(["nosuchcommand"]) == 1


def listing_tasks(store):
    """The five-task snapshot used for the byte-stable listing check."""
    names = ["A", "B", "C", "D", "E"]
    apps = ["generate", "simulate", "simulate", "simulate", "reduce"]
    finished = [TaskState.STAGED_IN, TaskState.PREPROCESSED, TaskState.RUNNING,
                TaskState.RUN_DONE, TaskState.POSTPROCESSED,
                TaskState.STAGED_OUT, TaskState.JOB_FINISHED]
    chains = {
        "A": finished, "B": finished,
        "C": [TaskState.STAGED_IN, TaskState.PREPROCESSED, TaskState.RUNNING],
        "D": [TaskState.STAGED_IN, TaskState.PREPROCESSED, TaskState.RUNNING],
        "E": [],
    }
    for app_name in set(apps):
        store.register_app(model.AppDefinition(app_name, "true"))
    tasks = []
    for name, app_name in zip(names, apps):
        t = model.new_task(name, "sample", app_name)
        store.insert([t])
        first = TaskState.READY if name != "E" else TaskState.AWAITING_PARENTS
        store.update_batch([(t.id, first, "", model.utcnow())])
        for to in chains[name]:
            store.update_batch([(t.id, to, "", model.utcnow())])
        tasks.append(store.get(t.id))
    return tasks


class TestListing:
    def test_column_layout_is_byte_stable(self, cli_project):
        tasks = listing_tasks(cli_project.store)
        table = format_task_table(tasks)
        lines = table.splitlines()
        header = ("                              job_id | name | workflow "
                  "| application |            state")
        assert lines[0] == header
        assert len(header) == 87
        assert lines[1] == "-" * 87
        for line, t in zip(lines[2:], tasks):
            left = f"{t.id} | {t.name}    | sample   | "
            assert line.startswith(left)
            assert line.endswith(t.state.value)
        # the widest state pads flush to the full table width
        e_line = lines[6]
        assert e_line.endswith("AWAITING_PARENTS") and len(e_line) == 87

    def test_empty_store_header_only(self, cli_project, capsys):
        capsys.readouterr()
        assert main(["ls"]) == 0
        lines = out_of(capsys).splitlines()
        assert lines[0].endswith("state")
        assert set(lines[1]) == {"-"}
        assert len(lines) == 2

    def test_ls_filters_and_history(self, cli_project, capsys):
        listing_tasks(cli_project.store)
        capsys.readouterr()
        assert main(["ls", "--state=RUNNING"]) == 0
        body = out_of(capsys)
        assert " C " in body and " D " in body and " A " not in body
        assert main(["ls", "--state=bogus"]) == 1
        assert main(["ls", "--history"]) == 0
        assert "JOB_FINISHED" in out_of(capsys)

    def test_read_your_writes(self, cli_project, capsys):
        main(["app", "--name=a", "--exec=true"])
        main(["job", "--name=fresh", "--workflow=w", "--application=a"])
        capsys.readouterr()
        main(["ls"])
        assert "fresh" in out_of(capsys)


class TestGraphCommands:
    def _two(self, cli_project):
        store = cli_project.store
        store.register_app(model.AppDefinition("a", "true"))
        return make_task(store, application="a"), make_task(store, application="a")

    def test_dep_by_prefix(self, cli_project):
        p, c = self._two(cli_project)
        assert main(["dep", p.id[:8], c.id[:8]]) == 0
        assert cli_project.store.parents_of(c.id) == [p.id]

    def test_ambiguous_prefix(self, cli_project):
        store = cli_project.store
        store.register_app(model.AppDefinition("a", "true"))
        for i in range(40):
            make_task(store, name=f"t{i}", application="a")
        assert main(["kill", ""]) == 1

    def test_kill_recursive(self, cli_project, capsys):
        p, c = self._two(cli_project)
        main(["dep", p.id[:8], c.id[:8]])
        capsys.readouterr()
        assert main(["kill", p.id[:8], "--recursive"]) == 0
        assert out_of(capsys).count("killed ") == 2
        assert cli_project.store.get(c.id).state == TaskState.USER_KILLED

    def test_kill_unknown(self, cli_project):
        assert main(["kill", "ffffffff"]) == 1

    def test_rm_requires_filter(self, cli_project):
        assert main(["rm"]) == 1

    def test_rm_by_state(self, cli_project):
        self._two(cli_project)
        assert main(["rm", "--state=CREATED"]) == 0
        assert cli_project.store.count() == 0


class TestProfileCommand:
    def test_profile_csv(self, cli_project, tmp_path, capsys):
        listing_tasks(cli_project.store)
        out = tmp_path / "series.csv"
        assert main(["profile", "--out", str(out)]) == 0
        assert out.read_text().startswith("timestamp,state,count")

    def test_utilization_requires_workers(self, cli_project):
        listing_tasks(cli_project.store)
        assert main(["profile", "--utilization"]) == 1
        assert main(["profile", "--utilization", "--workers", "2"]) == 0
