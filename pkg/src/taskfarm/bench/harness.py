"""Live benchmark harness: an in-process dispatcher plus real worker processes.

``LiveCluster`` runs the dispatcher inside the calling event loop (so benches
can read its counters without polling over the wire) and spawns workers as
separate processes through the local provider — the same processes a real
deployment would run.  Task bodies use the worker's ``@sleep`` builtin: the
point of these benches is to measure the coordination fabric, and a process
spawn per task would measure the operating system's fork rate instead.

All throughput numbers are computed from dispatcher-side timestamps: a batch's
makespan runs from the moment its first spec is accepted to the worker-reported
finish time of its last task.
"""

from __future__ import annotations

import asyncio
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from taskfarm.client import DispatcherClient
from taskfarm.dispatch import DispatcherCore, DispatcherServer
from taskfarm.proto import DispatchMode, TaskSpec
from taskfarm.provision import LocalProvider
from taskfarm.runlog import RunLogWriter

from taskfarm.bench.traces import WorkloadTrace

_MODES = {"push": DispatchMode.PUSH, "pull": DispatchMode.PULL}


def task_id_for(index: int, stream: int = 0) -> bytes:
    """Deterministic 16-byte task id: stream and index, big-endian."""
    return struct.pack(">QQ", stream, index)


def sleep_specs(n: int, seconds: float = 0.0, *, payload: bytes = b"",
                stream: int = 0, inputs: tuple = (),
                outputs: tuple = ()) -> list[TaskSpec]:
    """Specs for the worker's built-in sleep task."""
    command = "@sleep" if seconds <= 0 else f"@sleep {seconds!r}"
    return [TaskSpec(task_id_for(i, stream), command, payload,
                     inputs, outputs) for i in range(n)]


@dataclass
class BatchResult:
    """Timing of one submitted batch, from dispatcher-side counters."""

    n_tasks: int
    makespan_s: float
    wall_s: float
    n_failed: int
    task_s: float = 0.0

    @property
    def throughput(self) -> float:
        return self.n_tasks / self.makespan_s if self.makespan_s > 0 else 0.0

    def efficiency(self, processors: int) -> float:
        if self.makespan_s <= 0:
            return 0.0
        return (self.n_tasks * self.task_s) / (processors * self.makespan_s)

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "makespan_s": self.makespan_s,
            "wall_s": self.wall_s,
            "n_failed": self.n_failed,
            "task_s": self.task_s,
            "throughput": self.throughput,
        }


class LiveCluster:
    """Dispatcher in this process + ``workers`` local worker processes."""

    def __init__(self, workers: int = 1, cores: int = 1, *,
                 mode: str = "push", bundle_size: int = 1,
                 link_mbps: Optional[float] = None,
                 heartbeat_interval: float = 2.0,
                 max_retries: int = 1, suspend_threshold: int = 3,
                 journal_path: Optional[Path] = None,
                 scratch_root: Optional[Path] = None,
                 extra_worker_args: tuple[str, ...] = (),
                 register_timeout: float = 90.0) -> None:
        if mode not in _MODES:
            raise ValueError(f"mode must be push or pull, got {mode!r}")
        self.n_workers = workers
        self.cores = cores
        self.mode = mode
        self.bundle_size = bundle_size
        self.link_mbps = link_mbps
        self.heartbeat_interval = heartbeat_interval
        self.max_retries = max_retries
        self.suspend_threshold = suspend_threshold
        self.journal_path = journal_path
        self.scratch_root = scratch_root or Path("/tmp/taskfarm-bench")
        self.extra_worker_args = extra_worker_args
        self.register_timeout = register_timeout

        self.core: Optional[DispatcherCore] = None
        self.server: Optional[DispatcherServer] = None
        self.client: Optional[DispatcherClient] = None
        self.provider: Optional[LocalProvider] = None
        self.handles: list = []
        self._stream = 0

    async def __aenter__(self) -> "LiveCluster":
        journal = None
        if self.journal_path is not None:
            journal = RunLogWriter(self.journal_path)
        self.core = DispatcherCore(bundle_size=self.bundle_size,
                                   max_retries=self.max_retries,
                                   suspend_threshold=self.suspend_threshold,
                                   journal=journal)
        self.server = DispatcherServer(
            self.core, "127.0.0.1", 0,
            heartbeat_interval=self.heartbeat_interval,
            link_mbps=self.link_mbps)
        await self.server.start()
        self.provider = LocalProvider(scratch_root=self.scratch_root,
                                      mode=self.mode,
                                      extra_args=self.extra_worker_args)
        self.handles = self.provider.start(self.n_workers, self.cores,
                                           "127.0.0.1", self.server.port,
                                           tag="bench")
        await self.wait_workers(self.n_workers, self.register_timeout)
        self.client = DispatcherClient("127.0.0.1", self.server.port)
        await self.client.connect()
        return self

    async def __aexit__(self, *exc) -> None:
        if self.client is not None:
            await self.client.close()
        if self.provider is not None:
            self.provider.stop(self.handles, grace_s=3.0)
        if self.server is not None:
            await self.server._shutdown()
        if self.core is not None and self.core.journal is not None:
            self.core.journal.close()

    async def wait_workers(self, n: int, timeout: float) -> None:
        assert self.core is not None
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            live = sum(1 for w in self.core.workers.values()
                       if not w.suspended)
            if live >= n:
                return
            for proc in self.handles:
                code = proc.poll()
                if code is not None and code != 0:
                    raise RuntimeError(
                        f"worker process exited with status {code} "
                        "before registering")
            await asyncio.sleep(0.05)
        raise TimeoutError(f"only {len(self.core.workers)} of {n} workers "
                           f"registered within {timeout:.0f}s")

    def _next_stream(self) -> int:
        self._stream += 1
        return self._stream

    async def run_batch(self, specs: Sequence[TaskSpec],
                        task_s: float = 0.0) -> BatchResult:
        """Submit specs and wait until every task reached done or failed."""
        assert self.core is not None and self.client is not None
        core = self.core
        done0, failed0 = core.n_done, core.n_failed
        target = done0 + failed0 + len(specs)
        sub_ns = core.now()
        t0 = time.perf_counter()
        fin0 = core.last_fin_ns
        await self.client.submit(specs)
        while core.n_done + core.n_failed < target:
            await asyncio.sleep(0.005)
        wall = time.perf_counter() - t0
        fin = core.last_fin_ns
        if fin is None or (fin0 is not None and fin <= fin0):
            makespan = wall  # all failures, or clock went sideways
        else:
            makespan = (fin - sub_ns) / 1e9
        return BatchResult(n_tasks=len(specs), makespan_s=makespan,
                           wall_s=wall, n_failed=core.n_failed - failed0,
                           task_s=task_s)

    async def run_sleep_batch(self, n: int, seconds: float = 0.0,
                              payload: bytes = b"") -> BatchResult:
        specs = sleep_specs(n, seconds, payload=payload,
                            stream=self._next_stream())
        return await self.run_batch(specs, task_s=seconds)

    async def run_trace(self, trace: WorkloadTrace) -> BatchResult:
        """Replay a workload trace live, one @sleep task per entry."""
        scaled = trace.scaled
        stream = self._next_stream()
        specs = [TaskSpec(task_id_for(i, stream), f"@sleep {d!r}")
                 for i, d in enumerate(scaled.tolist())]
        res = await self.run_batch(specs, task_s=float(scaled.mean()))
        return res


# ---- canned benchmarks ------------------------------------------------------


async def throughput_bench(n_tasks: int = 100_000, workers: int = 16,
                           cores: int = 1, mode: str = "push",
                           bundle_size: int = 1,
                           warmup: int = 2000) -> dict:
    """Peak no-op task throughput through the full wire path."""
    async with LiveCluster(workers, cores, mode=mode,
                           bundle_size=bundle_size) as cluster:
        if warmup:
            await cluster.run_sleep_batch(warmup)
        batch = await cluster.run_sleep_batch(n_tasks)
    out = batch.to_dict()
    out.update(workers=workers, cores=cores, mode=mode,
               bundle_size=bundle_size, kind="throughput")
    return out


async def bundling_bench(n_tasks: int = 1500,
                         bundle_sizes: Sequence[int] = (1, 10),
                         workers: int = 4, link_mbps: float = 1.0,
                         mode: str = "push") -> dict:
    """Same workload over an emulated slow link at several bundle sizes.

    Per-message overhead dominates a thin link, so carrying ten tasks per
    dispatch message should raise throughput well above the one-per-message
    baseline.
    """
    rows = []
    for bundle in bundle_sizes:
        async with LiveCluster(workers, 1, mode=mode, bundle_size=bundle,
                               link_mbps=link_mbps) as cluster:
            batch = await cluster.run_sleep_batch(n_tasks)
        row = batch.to_dict()
        row["bundle_size"] = bundle
        rows.append(row)
    base = rows[0]["throughput"]
    return {
        "kind": "bundling",
        "workers": workers,
        "link_mbps": link_mbps,
        "n_tasks": n_tasks,
        "rows": rows,
        "speedup_vs_first": [r["throughput"] / base if base else 0.0
                             for r in rows],
    }


async def payload_bench(sizes: Sequence[int] = (10, 100, 1024, 10240),
                        counts: Optional[Sequence[int]] = None,
                        workers: int = 4, link_mbps: float = 4.0,
                        bundle_size: int = 10) -> dict:
    """Throughput vs per-task data size over an emulated link.

    Every task carries ``size`` opaque payload bytes from submitter to
    dispatcher to worker, the way a real input-bearing task would.
    """
    if counts is None:
        counts = [max(80, min(1200, int(3.0e5 / (2 * s + 300))))
                  for s in sizes]
    rows = []
    async with LiveCluster(workers, 1, bundle_size=bundle_size,
                           link_mbps=link_mbps) as cluster:
        await cluster.run_sleep_batch(50)  # warm the path
        for size, n in zip(sizes, counts):
            batch = await cluster.run_sleep_batch(n, payload=b"x" * size)
            row = batch.to_dict()
            row["payload_bytes"] = size
            rows.append(row)
    return {
        "kind": "payload",
        "workers": workers,
        "link_mbps": link_mbps,
        "bundle_size": bundle_size,
        "rows": rows,
    }


async def efficiency_bench(task_lengths: Sequence[float] = (0.1, 0.5, 1.0,
                                                            2.0, 4.0),
                           workers: int = 64, waves: int = 4,
                           mode: str = "push") -> dict:
    """Worker-side efficiency for short tasks on a live cluster.

    Runs ``waves`` full waves of identical sleep tasks per length and reports
    n*t / (P * makespan) per length.  One cluster is reused across lengths so
    worker start-up is paid once.
    """
    rows = []
    async with LiveCluster(workers, 1, mode=mode) as cluster:
        await cluster.run_sleep_batch(workers)  # first-touch warmup
        for t in task_lengths:
            batch = await cluster.run_sleep_batch(workers * waves, seconds=t)
            row = batch.to_dict()
            row["task_s"] = t
            row["efficiency"] = batch.efficiency(workers)
            rows.append(row)
    return {
        "kind": "efficiency",
        "workers": workers,
        "waves": waves,
        "mode": mode,
        "rows": rows,
    }


async def replay_bench(trace: WorkloadTrace, workers: int, cores: int = 1,
                       bundle_size: int = 1) -> dict:
    """Replay a trace live and report makespan/efficiency."""
    processors = workers * cores
    async with LiveCluster(workers, cores,
                           bundle_size=bundle_size) as cluster:
        batch = await cluster.run_trace(trace)
    busy = float(trace.scaled.sum())
    out = batch.to_dict()
    out.update(kind="replay", trace=trace.name, workers=workers, cores=cores,
               processors=processors,
               efficiency=busy / (processors * batch.makespan_s)
               if batch.makespan_s > 0 else 0.0)
    return out
