"""Launch-command rendering, environment detection, scheduler adapters."""

import time

import pytest

from pilotgrid import platforms
from pilotgrid.errors import MissingEnvironment, UnboundPlaceholder, UnknownTemplate
from pilotgrid.model import new_task
from pilotgrid.platforms import (
    JOB_MODE_MPI,
    JOB_MODE_SERIAL,
    LaunchTemplate,
    LocalAdapter,
    MockScheduler,
    NodefileAdapter,
    load_templates,
    make_adapter,
    render_launch_command,
)
from pilotgrid.service import BatchJobSpec

MPIRUN = LaunchTemplate(
    "mpirun", "mpirun -n {nprocs} -npernode {ranks_per_node} {env_flags} {exe} {args}"
)


def spec(nodes=1, walltime=1.0):
    return BatchJobSpec(
        id="j1", queue_name="q", num_nodes=nodes, walltime_minutes=walltime,
        job_mode=JOB_MODE_SERIAL, task_ids=[],
    )


class TestRender:
    def test_serial_is_bare_command(self):
        t = new_task("a", "wf", "app", args="--steps 5")
        assert (
            render_launch_command(t, "/bin/sim.x", None, JOB_MODE_SERIAL)
            == "/bin/sim.x --steps 5"
        )

    def test_mpi_substitutes_geometry(self):
        t = new_task("a", "wf", "app", num_nodes=3, ranks_per_node=4, args="in.dat")
        cmd = render_launch_command(t, "/bin/sim.x", MPIRUN, JOB_MODE_MPI)
        # oracle: nprocs = num_nodes * ranks_per_node = 12
        assert cmd == "mpirun -n 12 -npernode 4 /bin/sim.x in.dat"

    def test_mpi_env_flags(self):
        t = new_task(
            "a", "wf", "app", num_nodes=1,
            environment={"B_VAR": "2", "A_VAR": "1"},
        )
        cmd = render_launch_command(t, "x", MPIRUN, JOB_MODE_MPI)
        assert "-x A_VAR -x B_VAR" in cmd  # sorted, deterministic

    def test_mpi_requires_template(self):
        t = new_task("a", "wf", "app")
        with pytest.raises(UnknownTemplate):
            render_launch_command(t, "x", None, JOB_MODE_MPI)

    def test_unbound_placeholder(self):
        t = new_task("a", "wf", "app")
        bad = LaunchTemplate("bad", "runner --gpus {gpus} {exe}")
        with pytest.raises(UnboundPlaceholder):
            render_launch_command(t, "x", bad, JOB_MODE_MPI)

    def test_rendering_injective_over_geometry(self):
        # distinct geometries must never collapse to the same command
        seen = {}
        for nodes in range(1, 6):
            for rpn in range(1, 6):
                t = new_task("a", "wf", "app", num_nodes=nodes, ranks_per_node=rpn)
                cmd = render_launch_command(t, "x", MPIRUN, JOB_MODE_MPI)
                assert cmd not in seen, (seen.get(cmd), (nodes, rpn))
                seen[cmd] = (nodes, rpn)

    def test_load_templates_skips_batch_script(self, project):
        templates = load_templates(project.template_dir)
        assert set(templates) == {"mpirun", "aprun", "srun"}


class TestDetection:
    def test_local_nodes_from_env(self):
        ns = LocalAdapter().detect_environment(
            {"PILOTGRID_LOCAL_NODES": "4", "PILOTGRID_TIME_LIMIT_MIN": "2"}
        )
        assert [n.id for n in ns.nodes] == [f"vnode{i:03d}" for i in range(4)]
        assert ns.remaining_walltime == 120.0

    def test_local_missing_env(self):
        with pytest.raises(MissingEnvironment):
            LocalAdapter().detect_environment({})

    def test_nodefile(self, tmp_path):
        nf = tmp_path / "nodes"
        nf.write_text("nodeA\nnodeB\n\n")
        ns = NodefileAdapter().detect_environment({"PILOTGRID_NODEFILE": str(nf)})
        assert [n.id for n in ns.nodes] == ["nodeA", "nodeB"]
        assert ns.remaining_walltime == float("inf")

    def test_make_adapter(self):
        assert make_adapter("local").name == "local"
        with pytest.raises(UnknownTemplate):
            make_adapter("bogus")

    def test_auto_adapter_prefers_nodefile(self, tmp_path):
        nf = tmp_path / "nodes"
        nf.write_text("n1\n")
        assert platforms.auto_adapter({"PILOTGRID_NODEFILE": str(nf)}).name == "nodefile"
        assert platforms.auto_adapter({}).name == "local"


def write_script(tmp_path, name, body):
    p = tmp_path / name
    p.write_text("#!/bin/sh\n" + body + "\n")
    return p


class TestLocalAdapterLifecycle:
    def test_submit_runs_script(self, tmp_path):
        adapter = LocalAdapter()
        marker = tmp_path / "ran"
        script = write_script(tmp_path, "job.sh", f"touch {marker}")
        sid = adapter.submit(script, spec())
        deadline = time.time() + 10
        while adapter.status(sid) == "running" and time.time() < deadline:
            time.sleep(0.02)
        assert adapter.status(sid) == "finished"
        assert marker.exists()
        assert adapter.status("ghost") == "vanished"

    def test_delete_running(self, tmp_path):
        adapter = LocalAdapter()
        sid = adapter.submit(write_script(tmp_path, "job.sh", "sleep 30"), spec())
        adapter.delete(sid)
        assert adapter.status(sid) == "vanished"


class TestMockScheduler:
    def test_strict_fifo_backfill_never_overtakes(self, tmp_path):
        mock = MockScheduler(node_pool=4)
        s_big = write_script(tmp_path, "big.sh", "sleep 0.4")
        s_small = write_script(tmp_path, "small.sh", "sleep 0.1")
        a = mock.submit(s_big, spec(nodes=3))
        b = mock.submit(s_big, spec(nodes=3))    # blocked: only 1 node free
        c = mock.submit(s_small, spec(nodes=1))  # would fit, but FIFO waits
        assert mock.status(a) == "running"
        assert mock.status(b) == "queued"
        assert mock.status(c) == "queued"
        assert mock.wait_all(timeout=15)

    def test_delete_queued_job_vanishes(self, tmp_path):
        mock = MockScheduler(node_pool=1)
        s = write_script(tmp_path, "job.sh", "sleep 0.2")
        a = mock.submit(s, spec(nodes=1))
        b = mock.submit(s, spec(nodes=1))
        assert mock.status(b) == "queued"
        mock.delete(b)
        assert mock.status(b) == "vanished"
        assert mock.wait_all(timeout=15)
        assert mock.status(a) == "finished"

    def test_jobs_get_nodefile_environment(self, tmp_path):
        out = tmp_path / "env.txt"
        mock = MockScheduler(node_pool=2)
        s = write_script(
            tmp_path, "job.sh",
            f'cat "$PILOTGRID_NODEFILE" > {out}; echo "$PILOTGRID_TIME_LIMIT_MIN" >> {out}',
        )
        mock.submit(s, spec(nodes=2, walltime=7.5))
        assert mock.wait_all(timeout=15)
        lines = out.read_text().split()
        assert len(lines) == 3 and lines[2] == "7.5"
