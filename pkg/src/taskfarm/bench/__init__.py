"""Benchmark harness: workload traces, live-cluster drivers, reports."""

from taskfarm.bench.traces import (
    WorkloadTrace,
    generate_trace,
    load_trace,
    replay_sim,
    save_trace,
)

__all__ = [
    "WorkloadTrace",
    "generate_trace",
    "load_trace",
    "replay_sim",
    "save_trace",
]
