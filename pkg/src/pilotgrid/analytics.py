"""Workflow execution profiles from stored state histories.

Everything here replays provenance events into exact step functions;
binning and plotting are left to whatever consumes the CSV export.
"""

from __future__ import annotations

import csv
from collections import defaultdict

from .errors import CorruptHistory
from .model import TaskState


class StateSeries:
    """Per-state step functions of task counts over time."""

    def __init__(self, series: dict):
        # state -> ordered list of (timestamp, count)
        self.series = series

    def get(self, state) -> list:
        return self.series.get(TaskState(state), [])

    def states(self):
        return sorted(self.series, key=lambda s: s.value)

    def total_created(self) -> int:
        pts = self.series.get(TaskState.CREATED, [])
        total = 0
        prev = 0
        for _, count in pts:
            if count > prev:
                total += count - prev
            prev = count
        return total


def process_job_times(histories) -> StateSeries:
    """Replay every task's history into per-state count step functions.

    ``histories`` is an iterable of StateEvent lists, one per task. Each
    event moves its task from the previous state's count to the new
    state's count at the event timestamp.
    """
    deltas = []  # (timestamp, state, +/-1)
    for history in histories:
        prev_state, prev_ts = None, None
        for ev in history:
            if prev_ts is not None and ev.timestamp < prev_ts:
                raise CorruptHistory(
                    f"non-monotone history: {ev.timestamp} after {prev_ts}"
                )
            if prev_state is not None:
                deltas.append((ev.timestamp, prev_state, -1))
            deltas.append((ev.timestamp, ev.state, +1))
            prev_state, prev_ts = ev.state, ev.timestamp
    deltas.sort(key=lambda d: d[0])
    counts = defaultdict(int)
    series = defaultdict(list)
    i = 0
    while i < len(deltas):
        ts = deltas[i][0]
        touched = set()
        while i < len(deltas) and deltas[i][0] == ts:
            _, state, diff = deltas[i]
            counts[state] += diff
            touched.add(state)
            i += 1
        for state in touched:
            series[state].append((ts, counts[state]))
    return StateSeries(dict(series))


def utilization(series: StateSeries, workers: int, start=None, end=None):
    """RUNNING count over worker slots, clipped to [0, 1].

    Returns (points, mean): the step function as (timestamp, fraction)
    pairs and its time-weighted mean over [start, end] (defaulting to the
    span of the RUNNING series).
    """
    if workers <= 0:
        raise ValueError("workers must be positive")
    running = series.get(TaskState.RUNNING)
    points = [
        (ts, min(1.0, max(0.0, count / workers))) for ts, count in running
    ]
    if not points:
        return [], 0.0
    start = start or points[0][0]
    end = end or points[-1][0]
    if end <= start:
        return points, 0.0
    total = 0.0
    frac = 0.0
    prev = start
    for ts, value in points:
        if ts <= start:
            frac = value
            continue
        if ts >= end:
            break
        total += frac * (ts - prev).total_seconds()
        prev, frac = ts, value
    total += frac * (end - prev).total_seconds()
    mean = total / (end - start).total_seconds()
    return points, mean


def throughput(completed: int, span_minutes: float, nodes: int):
    """(tasks per node-hour, tasks per second) for a completed span."""
    if span_minutes <= 0:
        raise ValueError("span_minutes must be positive")
    if completed == 0:
        return 0.0, 0.0
    per_node_hour = completed / (nodes * span_minutes / 60.0)
    per_second = completed / (span_minutes * 60.0)
    return per_node_hour, per_second


def weak_scaling(throughputs: dict) -> dict:
    """Efficiency relative to the smallest node count's throughput."""
    if not throughputs:
        return {}
    base = min(throughputs)
    t_base = throughputs[base]
    return {
        n: (t / t_base) / (n / base) for n, t in sorted(throughputs.items())
    }


def write_series_csv(series: StateSeries, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "state", "count"])
        rows = [
            (ts.isoformat(), state.value, count)
            for state in series.states()
            for ts, count in series.get(state)
        ]
        rows.sort()
        w.writerows(rows)


def write_utilization_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "utilization"])
        for ts, value in points:
            w.writerow([ts.isoformat(), f"{value:.6f}"])
