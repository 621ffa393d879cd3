"""Queue policy, schedule simulation, packing, submission, reconciliation."""

import json

import pytest

from conftest import make_task
from pilotgrid import model
from pilotgrid.errors import InvalidField
from pilotgrid.model import TaskState, new_task
from pilotgrid.platforms import JOB_MODE_MPI, JOB_MODE_SERIAL, MockScheduler
from pilotgrid.service import (
    QueuePolicy,
    QueueRange,
    QueueRule,
    WALLTIME_SAFETY,
    eligible,
    load_policy,
    pack,
    reconcile,
    render_batch_script,
    simulate_schedule,
    submit_cycle,
)
from pilotgrid.store import TaskFilter


def T(nodes=1, wall=0.0, name="t", packing=1):
    return new_task(
        name, "wf", "app", num_nodes=nodes, wall_time_minutes=wall,
        node_packing_count=packing,
    )


def policy_one(lo, hi, wmin_h, wmax_h, max_queued=8, queue="q"):
    return QueuePolicy((QueueRule(queue, max_queued, (QueueRange(lo, hi, wmin_h, wmax_h),)),))


def est_for(rng):
    return lambda t: t.wall_time_minutes if t.wall_time_minutes > 0 else rng.wall_min_minutes


class TestPolicy:
    def test_load_policy_round_trip(self, tmp_path):
        p = tmp_path / "policy.json"
        p.write_text(json.dumps([
            {"queue_name": "debug", "max_queued": 2,
             "ranges": [{"nodes": [1, 8], "walltime_hours": [0.1, 1.0]}]},
            {"queue_name": "prod", "max_queued": 10,
             "ranges": [{"nodes": [128, 255], "walltime_hours": [0.5, 3.0]},
                        {"nodes": [256, 1024], "walltime_hours": [0.5, 6.0]}]},
        ]))
        policy = load_policy(p)
        assert [q.queue_name for q in policy.queues] == ["debug", "prod"]
        assert policy.max_nodes == 1024

    def test_invalid_ranges_rejected(self):
        with pytest.raises(InvalidField):
            QueueRange(8, 4, 0.1, 1.0)
        with pytest.raises(InvalidField):
            QueueRange(1, 4, 2.0, 1.0)
        with pytest.raises(InvalidField):
            QueueRule("q", 1, (QueueRange(1, 8, 0.1, 1), QueueRange(4, 16, 0.1, 1)))


class TestSimulateSchedule:
    def test_single_task(self):
        assert simulate_schedule([T(nodes=3, wall=7)], 8, lambda t: t.wall_time_minutes) == (7.0, 3)

    def test_serialized_on_one_node(self):
        tasks = [T(wall=5), T(wall=5)]
        assert simulate_schedule(tasks, 1, lambda t: t.wall_time_minutes) == (10.0, 1)

    def test_parallel_when_capacity_allows(self):
        tasks = [T(wall=5), T(wall=5)]
        assert simulate_schedule(tasks, 2, lambda t: t.wall_time_minutes) == (5.0, 2)

    def test_mixed_widths(self):
        # capacity 3: the 2-node and one 1-node task run first, the last
        # 1-node task backfills after the first completion wave
        tasks = [T(nodes=2, wall=10), T(wall=10), T(wall=10)]
        assert simulate_schedule(tasks, 3, lambda t: t.wall_time_minutes) == (20.0, 3)


class TestPack:
    def test_unknown_estimate_gets_range_minimum_walltime(self):
        policy = policy_one(128, 255, 0.5, 3.0)
        res = pack([T(nodes=130)], policy, {})
        assert len(res.specs) == 1
        spec = res.specs[0]
        assert spec.num_nodes == 130
        assert spec.walltime_minutes == 30.0
        assert spec.job_mode == JOB_MODE_MPI

    def test_explicit_estimate_gets_safety_margin(self):
        policy = policy_one(1, 8, 0.1, 3.0)
        res = pack([T(wall=60)], policy, {})
        assert res.specs[0].walltime_minutes == pytest.approx(60 * WALLTIME_SAFETY)

    def test_walltime_clamped_to_range_max(self):
        policy = policy_one(1, 8, 0.1, 1.0)
        res = pack([T(wall=59)], policy, {})
        assert res.specs[0].walltime_minutes == 60.0

    def test_oversize_task_left_over(self):
        policy = policy_one(1, 8, 0.1, 1.0)
        big = T(nodes=16)
        res = pack([big, T()], policy, {})
        assert [t.id for t in res.leftover] == [big.id]
        assert len(res.specs) == 1

    def test_estimate_beyond_range_max_left_over(self):
        policy = policy_one(1, 8, 0.1, 1.0)
        slow = T(wall=90)
        res = pack([slow], policy, {})
        assert res.specs == [] and res.leftover == [slow]

    def test_headroom_respected(self):
        policy = policy_one(1, 1, 0.1, 0.5, max_queued=2)
        tasks = [T(wall=25, name=f"t{i}") for i in range(6)]  # 1 task per job
        res = pack(tasks, policy, {"q": 1})  # one already queued
        assert len(res.specs) == 1
        assert len(res.leftover) == 5

    def test_serial_mode_iff_all_single_slot(self):
        policy = policy_one(1, 8, 0.1, 1.0)
        assert pack([T(packing=4), T()], policy, {}).specs[0].job_mode == JOB_MODE_SERIAL
        assert pack([T(nodes=2), T()], policy, {}).specs[0].job_mode == JOB_MODE_MPI

    def test_node_count_matches_simulated_concurrency(self):
        policy = policy_one(1, 100, 0.1, 1.0)
        tasks = [T(nodes=4, wall=30, name=f"t{i}") for i in range(3)]
        res = pack(tasks, policy, {})
        assert res.specs[0].num_nodes == 12  # all three run side by side

    def test_deterministic(self):
        policy = QueuePolicy((
            QueueRule("small", 3, (QueueRange(1, 8, 0.1, 1.0),)),
            QueueRule("big", 2, (QueueRange(9, 64, 0.5, 2.0),)),
        ))
        tasks = [T(nodes=n, wall=w, name=f"t{n}-{w}")
                 for n, w in [(1, 5), (12, 30), (3, 0), (64, 100), (2, 59)]]
        geometry = lambda r: [
            (s.queue_name, s.num_nodes, s.walltime_minutes, tuple(s.task_ids))
            for s in r.specs
        ]
        a, b = pack(tasks, policy, {}), pack(tasks, policy, {})
        assert geometry(a) == geometry(b)
        assert [t.id for t in a.leftover] == [t.id for t in b.leftover]

    def test_specs_fit_their_walltime(self):
        policy = policy_one(1, 4, 0.1, 0.75)
        tasks = [T(wall=20, name=f"t{i}") for i in range(9)]
        res = pack(tasks, policy, {})
        rng = policy.queues[0].ranges[0]
        for spec in res.specs:
            members = [t for t in tasks if t.id in spec.task_ids]
            makespan, used = simulate_schedule(members, spec.num_nodes, est_for(rng))
            assert makespan <= spec.walltime_minutes + 1e-9
            assert used <= spec.num_nodes
        packed = [tid for s in res.specs for tid in s.task_ids]
        assert sorted(packed) == sorted(t.id for t in tasks)


class TestEligible:
    def test_only_untagged_unleased_ready(self, store, app):
        ready = make_task(store, name="ready")
        tagged = make_task(store, name="tagged")
        leased = make_task(store, name="leased")
        waiting = make_task(store, name="waiting")
        store.add_edge(ready.id, waiting.id)
        store.tag_tasks([tagged.id], "job-1")
        got_first = eligible(store)  # classifies CREATED tasks on the way
        store.acquire(TaskFilter(ids={leased.id}), 1, "w1", lease_seconds=60)
        assert {t.id for t in eligible(store)} == {ready.id}
        assert {t.id for t in got_first} >= {ready.id, leased.id}

    def test_restart_ready_is_eligible(self, store, app):
        t = make_task(store)
        for to in (TaskState.READY, TaskState.STAGED_IN, TaskState.PREPROCESSED,
                   TaskState.RUNNING, TaskState.RUN_ERROR, TaskState.RESTART_READY):
            store.update_batch([(t.id, to, "", model.utcnow())])
        assert [x.id for x in eligible(store)] == [t.id]

    def test_expired_lease_cleared(self, store, app):
        t = make_task(store)
        store.update_batch([(t.id, TaskState.READY, "", model.utcnow())])
        store.acquire(TaskFilter(), 1, "w1", lease_seconds=0.0)
        assert [x.id for x in eligible(store)] == [t.id]


class TestRenderBatchScript:
    def test_placeholders_filled(self, project):
        from pilotgrid.service import BatchJobSpec

        spec = BatchJobSpec(
            id="abc", queue_name="q", num_nodes=3, walltime_minutes=45.0,
            job_mode=JOB_MODE_SERIAL, task_ids=["x"],
        )
        text = render_batch_script(
            (project.template_dir / "batch_job.tmpl").read_text(), spec
        )
        assert "--batch-tag=abc" in text
        assert "--job-mode=serial" in text
        assert "--time-limit=45.0" in text


class TestSubmitAndReconcile:
    def _setup(self, project, store, n_tasks, wall=25.0):
        store.register_app(model.AppDefinition("noop", "true"))
        tasks = [make_task(store, name=f"t{i}", wall_time_minutes=wall)
                 for i in range(n_tasks)]
        # each job fits exactly one 25-min task inside the 30-min range max
        policy = policy_one(1, 1, 0.1, 0.5, max_queued=4)
        return tasks, policy

    def test_submit_tags_and_records(self, project, store):
        tasks, policy = self._setup(project, store, 2)
        mock = MockScheduler(node_pool=1)
        # replace the batch script so no real launcher spawns here
        (project.template_dir / "batch_job.tmpl").write_text("sleep 30\n")
        specs = submit_cycle(project, policy, mock)
        assert len(specs) == 2
        for spec in specs:
            assert spec.scheduler_id
            for tid in spec.task_ids:
                assert store.get(tid).batch_tag == spec.id
        rows = store.list_batch_jobs()
        assert {r["status"] for r in rows} == {"queued"}
        reconcile(project, mock)  # polls the scheduler: one job started
        rows = store.list_batch_jobs()
        assert {r["status"] for r in rows} == {"queued", "running"}
        for spec in specs:
            mock.delete(spec.scheduler_id)

    def test_vanished_job_is_untagged_and_repacked(self, project, store):
        tasks, policy = self._setup(project, store, 2)
        mock = MockScheduler(node_pool=1)
        (project.template_dir / "batch_job.tmpl").write_text("sleep 30\n")
        specs = submit_cycle(project, policy, mock)
        queued = [s for s in specs if mock.status(s.scheduler_id) == "queued"]
        assert queued
        victim = queued[0]
        mock.delete(victim.scheduler_id)  # external qdel
        actions = reconcile(project, mock)
        assert ("vanished", victim.id, len(victim.task_ids)) in actions
        for tid in victim.task_ids:
            assert store.get(tid).batch_tag is None
        # next cycle packs the freed tasks again
        resubmitted = submit_cycle(project, policy, mock)
        assert {tid for s in resubmitted for tid in s.task_ids} == set(victim.task_ids)
        for s in specs + resubmitted:
            mock.delete(s.scheduler_id)

    def test_reconcile_never_untags_running_tasks(self, project, store):
        tasks, policy = self._setup(project, store, 1)
        mock = MockScheduler(node_pool=1)
        (project.template_dir / "batch_job.tmpl").write_text("sleep 30\n")
        (spec,) = submit_cycle(project, policy, mock)
        tid = spec.task_ids[0]  # already READY via the eligibility sweep
        for to in (TaskState.STAGED_IN, TaskState.PREPROCESSED,
                   TaskState.RUNNING):
            store.update_batch([(tid, to, "", model.utcnow())])
        mock.delete(spec.scheduler_id)
        reconcile(project, mock)
        assert store.get(tid).batch_tag == spec.id  # still attributed
        mock.delete(spec.scheduler_id)
