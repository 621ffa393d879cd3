"""Command-line interface.

Exit codes: 0 success, 1 user error (bad flags, unknown ids, policy
violations), 2 internal error.
"""

from __future__ import annotations

import sys

import click

from . import analytics, dag, model, platforms, service as service_mod
from .errors import InvalidField, PilotGridError
from .launcher import Launcher
from .model import AppDefinition, TaskState
from .project import ENV_DB_PATH, find_project, init_project
from .store import TaskFilter


def format_task_table(tasks) -> str:
    """Render tasks as the fixed five-column listing."""
    headers = ("job_id", "name", "workflow", "application", "state")
    rows = [
        (t.id, t.name, t.workflow, t.application, t.state.value) for t in tasks
    ]
    widths = [
        max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
        for i, h in enumerate(headers)
    ]
    w0, w1, w2, w3, w4 = widths
    lines = [
        f"{headers[0]:>{w0}} | {headers[1]:<{w1}} | {headers[2]:<{w2}} "
        f"| {headers[3]:<{w3}} | {headers[4]:>{w4}}"
    ]
    lines.append("-" * len(lines[0]))
    for r in rows:
        line = f"{r[0]:>{w0}} | {r[1]:<{w1}} | {r[2]:<{w2}} | {r[3]:<{w3}} | {r[4]}"
        lines.append(line.rstrip())
    return "\n".join(lines)


def _state_filter(state: str | None):
    if state is None:
        return None
    try:
        return {TaskState(state)}
    except ValueError:
        raise click.BadParameter(f"unknown state {state!r}", param_hint="--state")


def _parse_env(pairs) -> dict:
    env = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise click.BadParameter(
                f"expected KEY=VAL, got {pair!r}", param_hint="--env"
            )
        env[key] = value
    return env


@click.group()
def cli():
    """Workflow manager for high-throughput task campaigns."""


@cli.command()
@click.argument("path")
def init(path):
    """Create a new project directory at PATH."""
    proj = init_project(path)
    click.echo(f"initialized project at {proj.path.resolve()}")


@cli.command()
@click.argument("path")
def activate(path):
    """Print the shell export that selects PATH as the active project."""
    proj = find_project(path)
    click.echo(f"export {ENV_DB_PATH}={proj.path.resolve()}")


@cli.command()
@click.option("--name", required=True)
@click.option("--exec", "executable", required=True, help="Executable path.")
@click.option("--preprocess", default="", help="Hook run before the task.")
@click.option("--postprocess", default="", help="Hook run after the task.")
@click.option("--error-policy", default="fail",
              help="One of: fail, retry:N, handler.")
def app(name, executable, preprocess, postprocess, error_policy):
    """Register an application."""
    proj = find_project()
    proj.store.register_app(
        AppDefinition(name, executable, preprocess, postprocess, error_policy)
    )
    click.echo(f"registered application {name}")


@cli.command()
@click.option("--name", required=True)
@click.option("--workflow", required=True)
@click.option("--application", required=True)
@click.option("--args", default="")
@click.option("--env", "env_pairs", multiple=True, metavar="KEY=VAL")
@click.option("--num-nodes", default=1, type=int)
@click.option("--ranks-per-node", default=1, type=int)
@click.option("--node-packing-count", default=1, type=int)
@click.option("--wall-time-minutes", default=0.0, type=float)
@click.option("--input-files", default="",
              help="Space-separated glob patterns matched in parent outputs.")
@click.option("--stage-in", "stage_in", multiple=True,
              help="File or directory copied into the work dir (repeatable).")
@click.option("--stage-out-patterns", default="")
@click.option("--stage-out-dest", default="")
def job(name, workflow, application, args, env_pairs, num_nodes,
        ranks_per_node, node_packing_count, wall_time_minutes, input_files,
        stage_in, stage_out_patterns, stage_out_dest):
    """Add one task; prints its UUID."""
    proj = find_project()
    task = model.new_task(
        name, workflow, application,
        args=args,
        environment=_parse_env(env_pairs),
        num_nodes=num_nodes,
        ranks_per_node=ranks_per_node,
        node_packing_count=node_packing_count,
        wall_time_minutes=wall_time_minutes,
        input_files=input_files,
        stage_in_sources=tuple(stage_in),
        stage_out_patterns=stage_out_patterns,
        stage_out_dest=stage_out_dest,
    )
    proj.store.insert([task])
    click.echo(task.id)


@cli.command()
@click.option("--state", default=None)
@click.option("--wf", default=None, help="Filter by workflow name.")
@click.option("--name", default=None, help="Filter by name substring.")
@click.option("--app", "application", default=None)
@click.option("--history", is_flag=True,
              help="Append each task's state event log.")
def ls(state, wf, name, application, history):
    """List tasks."""
    proj = find_project()
    flt = TaskFilter(
        states=_state_filter(state),
        workflow=wf,
        name_contains=name,
        application=application,
    )
    tasks = proj.store.query(flt)
    click.echo(format_task_table(tasks))
    if history:
        for task in tasks:
            click.echo(f"\n{task.id} [{task.name}]")
            for ev in task.state_history:
                msg = f"  {ev.message}" if ev.message else ""
                click.echo(f"  {ev.timestamp.isoformat()} {ev.state.value}{msg}")


@cli.command()
@click.argument("parent")
@click.argument("child")
def dep(parent, child):
    """Add a dependency edge; ids may be unique prefixes."""
    proj = find_project()
    pid = proj.store.resolve_prefix(parent)
    cid = proj.store.resolve_prefix(child)
    dag.add_dependency(proj.store, pid, cid)
    click.echo(f"dependency added: {pid[:8]} -> {cid[:8]}")


@cli.command()
@click.argument("task_id")
@click.option("--recursive", is_flag=True,
              help="Also kill the full descendant closure.")
def kill(task_id, recursive):
    """Mark a task USER_KILLED; running processes are stopped shortly."""
    proj = find_project()
    tid = proj.store.resolve_prefix(task_id)
    marked = dag.kill(proj.store, tid, recursive=recursive)
    for mid in marked:
        click.echo(f"killed {mid}")


@cli.command()
@click.option("--id", "ids", multiple=True, help="Task id prefix (repeatable).")
@click.option("--state", default=None)
@click.option("--wf", default=None)
@click.option("--name", default=None)
def rm(ids, state, wf, name):
    """Delete tasks matching the given filters."""
    if not ids and state is None and wf is None and name is None:
        raise click.UsageError("rm requires at least one filter flag")
    proj = find_project()
    flt = TaskFilter(
        states=_state_filter(state),
        workflow=wf,
        name_contains=name,
        ids={proj.store.resolve_prefix(p) for p in ids} if ids else None,
    )
    victims = proj.store.query(flt)
    proj.store.remove([t.id for t in victims])
    click.echo(f"removed {len(victims)} task(s)")


@cli.command()
@click.option("--job-mode", default=platforms.JOB_MODE_SERIAL,
              type=click.Choice([platforms.JOB_MODE_SERIAL,
                                 platforms.JOB_MODE_MPI]))
@click.option("--wf-filter", default=None)
@click.option("--batch-tag", default=None)
@click.option("--time-limit", default=None, type=float,
              help="Walltime budget in minutes.")
def launcher(job_mode, wf_filter, batch_tag, time_limit):
    """Run the pilot worker until no acquirable work remains."""
    proj = find_project()
    summary = Launcher(
        proj,
        job_mode=job_mode,
        wf_filter=wf_filter,
        batch_tag=batch_tag,
        time_limit_min=time_limit,
    ).run()
    click.echo(
        "launcher done: "
        f"{summary['dispatched']} dispatched, {summary['finished']} finished"
    )


@cli.command()
@click.option("--dry-run", is_flag=True,
              help="Print the packing plan without submitting.")
@click.option("--once", is_flag=True, help="Run a single cycle and exit.")
def service(dry_run, once):
    """Run the batch-job packing and submission service."""
    proj = find_project()
    svc = service_mod.Service(proj, platforms.auto_adapter())
    specs = svc.run(once=once, dry_run=dry_run)
    for spec in specs or []:
        click.echo(
            f"{'plan' if dry_run else 'submitted'} {spec.id[:8]}: "
            f"queue={spec.queue_name} nodes={spec.num_nodes} "
            f"walltime={spec.walltime_minutes:g}min tasks={len(spec.task_ids)}"
        )


@cli.command()
@click.option("--wf", default=None, help="Restrict to one workflow.")
@click.option("--out", default=None, type=click.Path(dir_okay=False),
              help="Write CSV here instead of printing a summary.")
@click.option("--utilization", is_flag=True,
              help="Emit the running-fraction series instead of state counts.")
@click.option("--workers", default=None, type=int,
              help="Worker slot count for utilization.")
def profile(wf, out, utilization, workers):
    """Derive state-count or utilization series from stored histories."""
    proj = find_project()
    tasks = proj.store.query(TaskFilter(workflow=wf))
    series = analytics.process_job_times([t.state_history for t in tasks])
    if utilization:
        if not workers:
            raise click.UsageError("--utilization requires --workers N")
        points, mean = analytics.utilization(series, workers)
        if out:
            analytics.write_utilization_csv(points, out)
            click.echo(f"wrote {out}")
        click.echo(f"mean utilization: {mean:.4f}")
    elif out:
        analytics.write_series_csv(series, out)
        click.echo(f"wrote {out}")
    else:
        for state in series.states():
            pts = series.get(state)
            click.echo(f"{state.value}: {len(pts)} change(s), last count "
                       f"{pts[-1][1]}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except PilotGridError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # pragma: no cover - internal failures
        click.echo(f"internal error: {exc!r}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
