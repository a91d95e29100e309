"""Dispatch service: task intake, scheduling, failure policy, statistics.

The module is split in two layers:

``DispatcherCore`` is a synchronous state machine — every scheduling decision,
retry rule, and counter lives here, with no sockets or clocks of its own. The
asyncio layer drives it one call at a time, which makes the whole scheduler
race-free by construction and directly unit-testable.

``DispatcherServer`` owns the event loop: one binary-protocol port shared by
workers and clients, heartbeat supervision, journal flushing, optional
token-bucket shaping of aggregate link bytes (to study payload-bound regimes
on a fast loopback), and push/pull delivery.

Failure policy
--------------
COMM failures (transport interruptions, lost workers) requeue the task at the
front of the queue and are never charged against it. APP failures (the task's
own nonzero exit, timeout, bad inputs) retry up to ``max_retries`` times and
then fail the task permanently. FAIL_FAST failures (node-level damage such as
a stale filesystem handle) requeue the task without charge but increment the
worker's consecutive-failure count; at ``suspend_threshold`` the worker is
suspended and everything in flight on it is requeued to finish elsewhere.
A successful result resets the worker's count. Results for tasks already done
are ignored, so at-least-once delivery never double-counts.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from . import proto
from .proto import (
    Ack, DispatchMode, ErrorClass, FrameDecoder, Heartbeat, MsgKind,
    ProtocolError, Register, Result, Role, Shutdown, StatusQuery, StatusReply,
    Submit, SubmitReply, SubmitStatus, Suspend, TaskRequest, TaskResult,
    TaskSpec, WireCalibration, encode_task_spec, frame_raw,
)
from .runlog import RunLogWriter, new_run_id, replay_state

log = logging.getLogger("taskfarm.dispatch")

_U16 = proto._U16
_U64 = proto._U64

_CAL = WireCalibration()
_WIRE_BYTE_FACTOR = 1.0 + _CAL.header / _CAL.mss
_WIRE_FRAME_FIXED = (_CAL.fixed_overhead + _CAL.header * _CAL.base_packets) / 2.0


class TaskState(Enum):
    QUEUED = "queued"
    DISPATCHED = "dispatched"
    DONE = "done"
    FAILED = "failed"


class CompleteOutcome(Enum):
    DONE = "done"
    RETRY = "retry"
    FAILED = "failed"
    DUPLICATE = "duplicate"
    STALE = "stale"
    UNKNOWN = "unknown"


class InvalidComparison(ValueError):
    """compare_runs was given runs that cannot be meaningfully compared."""


@dataclass
class TaskRecord:
    spec: TaskSpec
    raw: bytes                      # encoded spec, framed without re-serializing
    state: TaskState = TaskState.QUEUED
    app_attempts: int = 0           # failed attempts charged to the task
    comm_retries: int = 0
    dispatch_count: int = 0
    worker_id: int = 0
    last_dispatched_ns: int = -1
    result: Optional[TaskResult] = None


@dataclass
class WorkerState:
    worker_id: int
    cores: int
    mode: DispatchMode
    tag: str = ""
    # dispatched-but-unfinished task ids, in dispatch order
    in_flight: dict[bytes, None] = field(default_factory=dict)
    consecutive_failures: int = 0
    suspended: bool = False
    pull_want: int = 0              # parked pull request, tasks wanted
    last_seen_ns: int = 0
    tasks_done: int = 0

    def budget(self, bundle_size: int) -> int:
        """How many tasks may be outstanding on this worker at once.

        With bundling the dispatcher intentionally over-commits by one bundle
        so the worker always has local work queued behind the running tasks.
        """
        if self.suspended:
            return 0
        extra = bundle_size if bundle_size > 1 else 0
        return self.cores + extra

    def free_slots(self, bundle_size: int) -> int:
        return max(0, self.budget(bundle_size) - len(self.in_flight))


class DispatcherCore:
    """Synchronous scheduling state machine; see module docstring."""

    def __init__(self, *, bundle_size: int = 1, max_retries: int = 1,
                 suspend_threshold: int = 3, run_id: Optional[str] = None,
                 epoch_ns: Optional[int] = None,
                 journal: Optional[RunLogWriter] = None,
                 clock: Optional[Callable[[], int]] = None) -> None:
        if bundle_size < 1:
            raise ValueError("bundle_size must be >= 1")
        self.bundle_size = bundle_size
        self.max_retries = max_retries
        self.suspend_threshold = suspend_threshold
        self.run_id = run_id or new_run_id()
        self.epoch_ns = epoch_ns if epoch_ns is not None else time.time_ns()
        self.journal = journal
        self._clock = clock or (lambda: time.time_ns() - self.epoch_ns)

        self.records: dict[bytes, TaskRecord] = {}
        self.queue: deque[bytes] = deque()
        self.workers: dict[int, WorkerState] = {}
        self.n_queued = 0
        self.n_dispatched = 0
        self.n_done = 0
        self.n_failed = 0
        self.n_requeues = 0
        self.n_unknown_results = 0
        self.n_stale_results = 0
        self.first_sub_ns: Optional[int] = None
        self.last_fin_ns: Optional[int] = None
        self._recent_fins: deque[int] = deque()  # for 1 s window throughput

    # ---- intake ----------------------------------------------------------

    def now(self) -> int:
        return self._clock()

    def preload_completed(self, done_ids: Iterable[bytes],
                          failed_ids: Iterable[bytes] = ()) -> None:
        """Mark work finished in an earlier session (journal replay) so a
        resubmission of those ids reports AlreadyComplete and is skipped."""
        for task_id in done_ids:
            rec = TaskRecord(spec=None, raw=b"", state=TaskState.DONE)  # type: ignore[arg-type]
            self.records[task_id] = rec
            self.n_done += 1
        for task_id in failed_ids:
            self.records[task_id] = TaskRecord(
                spec=None, raw=b"", state=TaskState.FAILED)  # type: ignore[arg-type]
            self.n_failed += 1

    def submit(self, specs: Iterable[TaskSpec],
               journal_event: bool = True) -> list[tuple[bytes, SubmitStatus]]:
        out = []
        for spec in specs:
            known = self.records.get(spec.task_id)
            if known is not None:
                status = (SubmitStatus.ALREADY_COMPLETE
                          if known.state in (TaskState.DONE, TaskState.FAILED)
                          else SubmitStatus.DUPLICATE)
                out.append((spec.task_id, status))
                continue
            rec = TaskRecord(spec=spec, raw=encode_task_spec(spec))
            self.records[spec.task_id] = rec
            self.queue.append(spec.task_id)
            self.n_queued += 1
            if self.first_sub_ns is None:
                self.first_sub_ns = self.now()
            if self.journal is not None and journal_event:
                self.journal.submitted(spec)
            out.append((spec.task_id, SubmitStatus.ACCEPTED))
        return out

    # ---- workers ---------------------------------------------------------

    def register_worker(self, worker_id: int, cores: int, mode: DispatchMode,
                        tag: str = "") -> WorkerState:
        if worker_id in self.workers:
            raise ValueError(f"worker id {worker_id} already registered")
        if cores < 1:
            raise ValueError("worker must register at least one core")
        w = WorkerState(worker_id, cores, mode, tag, last_seen_ns=self.now())
        self.workers[worker_id] = w
        if self.journal is not None:
            self.journal.worker_registered(worker_id, cores, mode.name.lower(),
                                           tag)
        return w

    def worker_lost(self, worker_id: int, reason: str = "disconnect") -> None:
        w = self.workers.pop(worker_id, None)
        if w is None:
            return
        if self.journal is not None:
            self.journal.worker_lost(worker_id, reason)
        # reversed + appendleft keeps the front of the queue in dispatch order
        for task_id in reversed(list(w.in_flight)):
            self._requeue(self.records[task_id], "worker-lost", front=True)
        w.in_flight.clear()

    def touch_worker(self, worker_id: int) -> None:
        w = self.workers.get(worker_id)
        if w is not None:
            w.last_seen_ns = self.now()

    def stale_workers(self, timeout_ns: int) -> list[int]:
        cutoff = self.now() - timeout_ns
        return [w.worker_id for w in self.workers.values()
                if w.last_seen_ns < cutoff]

    # ---- scheduling ------------------------------------------------------

    def _pop_queued(self) -> Optional[TaskRecord]:
        """Next live entry, skipping ids whose state moved on while queued."""
        while self.queue:
            task_id = self.queue.popleft()
            rec = self.records[task_id]
            if rec.state is TaskState.QUEUED:
                return rec
        return None

    def _mark_dispatched(self, rec: TaskRecord, worker: WorkerState,
                         dispatched_ns: int) -> None:
        rec.state = TaskState.DISPATCHED
        rec.dispatch_count += 1
        rec.worker_id = worker.worker_id
        rec.last_dispatched_ns = dispatched_ns
        worker.in_flight[rec.spec.task_id] = None
        self.n_queued -= 1
        self.n_dispatched += 1
        if self.journal is not None:
            self.journal.dispatched(rec.spec.task_id, worker.worker_id,
                                    rec.app_attempts + 1)

    def next_assignment(self, worker_id: int,
                        max_tasks: int) -> tuple[list[TaskRecord], int]:
        """Pull-mode assignment; returns (records, dispatched_ns).

        Empty with the worker suspended means "tell it to stand down"; empty
        otherwise parks the request until work arrives.
        """
        w = self.workers[worker_id]
        if w.suspended:
            return [], 0
        limit = min(max_tasks, w.free_slots(self.bundle_size))
        picked: list[TaskRecord] = []
        ts = self.now()
        while len(picked) < limit:
            rec = self._pop_queued()
            if rec is None:
                break
            self._mark_dispatched(rec, w, ts)
            picked.append(rec)
        if not picked:
            w.pull_want = max_tasks
        return picked, ts

    def push_assignments(self) -> list[tuple[WorkerState, list[TaskRecord], int]]:
        """Fill free capacity: most free slots first, lowest id on ties.

        Serves push-mode workers and parked pull requests alike; each
        assignment holds at most one bundle so frames stay bounded.
        """
        if not self.queue:
            return []
        eligible = [
            w for w in self.workers.values()
            if not w.suspended and w.free_slots(self.bundle_size) > 0
            and (w.mode is DispatchMode.PUSH or w.pull_want > 0)
        ]
        if not eligible:
            return []
        out: list[tuple[WorkerState, list[TaskRecord], int]] = []
        ts = self.now()
        # stable ordering: free slots descending, then worker id
        eligible.sort(key=lambda w: (-w.free_slots(self.bundle_size),
                                     w.worker_id))
        active = deque(eligible)
        while active:
            w = active.popleft()
            room = w.free_slots(self.bundle_size)
            if w.mode is DispatchMode.PULL:
                room = min(room, w.pull_want)
            take = min(room, self.bundle_size)
            batch: list[TaskRecord] = []
            while len(batch) < take:
                rec = self._pop_queued()
                if rec is None:
                    break
                self._mark_dispatched(rec, w, ts)
                batch.append(rec)
            if not batch:
                break  # queue exhausted
            if w.mode is DispatchMode.PULL:
                w.pull_want -= len(batch)
            out.append((w, batch, ts))
            if (w.free_slots(self.bundle_size) > 0 and self.queue
                    and (w.mode is DispatchMode.PUSH or w.pull_want > 0)):
                active.append(w)
        return out

    # ---- completion ------------------------------------------------------

    def complete(self, result: TaskResult) -> CompleteOutcome:
        rec = self.records.get(result.task_id)
        if rec is None:
            self.n_unknown_results += 1
            log.warning("result for unknown task %s ignored",
                        result.task_id.hex())
            return CompleteOutcome.UNKNOWN
        worker = self.workers.get(result.worker_id)
        if worker is not None:
            worker.in_flight.pop(result.task_id, None)

        if rec.state in (TaskState.DONE, TaskState.FAILED):
            self.n_stale_results += 1
            return CompleteOutcome.DUPLICATE

        if result.ok:
            # accept success even if this attempt was superseded: the work is
            # done, and finishing beats re-running it
            if rec.state is TaskState.QUEUED:
                self.n_queued -= 1  # lazily skipped when popped
            else:
                self.n_dispatched -= 1
            rec.state = TaskState.DONE
            rec.result = result
            self.n_done += 1
            if worker is not None:
                worker.consecutive_failures = 0
                worker.tasks_done += 1
            fin = result.finished_ns
            self.last_fin_ns = fin if self.last_fin_ns is None \
                else max(self.last_fin_ns, fin)
            self._recent_fins.append(fin)
            if self.journal is not None:
                self.journal.started(result.task_id, result.worker_id,
                                     result.started_ns)
                self.journal.finished(result.task_id, result.worker_id,
                                      fin, result.finished_ns - result.started_ns)
            return CompleteOutcome.DONE

        if (rec.state is not TaskState.DISPATCHED
                or result.dispatched_ns != rec.last_dispatched_ns):
            # failure from a superseded attempt: current attempt decides
            self.n_stale_results += 1
            return CompleteOutcome.STALE
        return self.handle_failure(rec, result, worker)

    def handle_failure(self, rec: TaskRecord, result: TaskResult,
                       worker: Optional[WorkerState]) -> CompleteOutcome:
        cls = result.error_class
        final = False
        if cls is ErrorClass.APP:
            rec.app_attempts += 1
            final = rec.app_attempts > self.max_retries
        elif cls is ErrorClass.COMM:
            rec.comm_retries += 1
        elif cls is ErrorClass.FAIL_FAST:
            rec.comm_retries += 1
            if worker is not None and not worker.suspended:
                worker.consecutive_failures += 1
                if worker.consecutive_failures >= self.suspend_threshold:
                    self.suspend_worker(worker)
        else:
            raise ProtocolError("failure result with ErrorClass.NONE")

        if self.journal is not None:
            self.journal.failed(rec.spec.task_id, result.worker_id,
                                result.exit_code, cls, result.detail,
                                rec.app_attempts, final)
        if final:
            rec.state = TaskState.FAILED
            rec.result = result
            self.n_dispatched -= 1
            self.n_failed += 1
            return CompleteOutcome.FAILED
        self._requeue(rec, cls.name.lower(), front=cls is not ErrorClass.APP)
        return CompleteOutcome.RETRY

    def _requeue(self, rec: TaskRecord, reason: str, front: bool) -> None:
        if rec.state is TaskState.DISPATCHED:
            self.n_dispatched -= 1
        rec.state = TaskState.QUEUED
        rec.last_dispatched_ns = -1
        self.n_queued += 1
        self.n_requeues += 1
        if front:
            self.queue.appendleft(rec.spec.task_id)
        else:
            self.queue.append(rec.spec.task_id)
        if self.journal is not None:
            self.journal.requeued(rec.spec.task_id, reason)

    def suspend_worker(self, worker: WorkerState) -> None:
        """Take a worker out of rotation and requeue its in-flight work."""
        worker.suspended = True
        if self.journal is not None:
            self.journal.worker_suspended(worker.worker_id)
        # reversed + appendleft keeps the front of the queue in dispatch order
        for task_id in reversed(list(worker.in_flight)):
            rec = self.records[task_id]
            if rec.state is TaskState.DISPATCHED:
                self._requeue(rec, "suspended-worker", front=True)
        worker.in_flight.clear()

    # ---- reporting -------------------------------------------------------

    @property
    def n_submitted(self) -> int:
        return len(self.records)

    @property
    def drained(self) -> bool:
        return (self.n_queued == 0 and self.n_dispatched == 0
                and self.n_submitted > 0)

    def throughput_1s(self) -> float:
        if not self._recent_fins:
            return 0.0
        now = self.now()
        window = 1_000_000_000
        while self._recent_fins and self._recent_fins[0] < now - window:
            self._recent_fins.popleft()
        return float(len(self._recent_fins))

    def makespan_s(self) -> float:
        if self.first_sub_ns is None or self.last_fin_ns is None:
            return 0.0
        return max(0.0, (self.last_fin_ns - self.first_sub_ns) / 1e9)

    def stats(self) -> dict:
        active = [w for w in self.workers.values() if not w.suspended]
        makespan = self.makespan_s()
        return {
            "run_id": self.run_id,
            "epoch_ns": self.epoch_ns,
            "submitted": self.n_submitted,
            "queued": self.n_queued,
            "dispatched": self.n_dispatched,
            "done": self.n_done,
            "failed": self.n_failed,
            "requeues": self.n_requeues,
            "unknown_results": self.n_unknown_results,
            "stale_results": self.n_stale_results,
            "drained": self.drained,
            "makespan_s": makespan,
            "throughput_1s": self.throughput_1s(),
            "throughput_avg": (self.n_done / makespan) if makespan > 0 else 0.0,
            "total_cores": sum(w.cores for w in active),
            "workers": [
                {
                    "id": w.worker_id, "cores": w.cores,
                    "mode": w.mode.name.lower(), "tag": w.tag,
                    "in_flight": len(w.in_flight),
                    "suspended": w.suspended,
                    "consecutive_failures": w.consecutive_failures,
                    "tasks_done": w.tasks_done,
                }
                for w in sorted(self.workers.values(),
                                key=lambda x: x.worker_id)
            ],
        }


# --- run comparison -----------------------------------------------------------


@dataclass(frozen=True)
class ComparisonReport:
    processors_ref: int
    processors_big: int
    makespan_ref: float
    makespan_big: float

    @property
    def speedup(self) -> float:
        return self.processors_ref * self.makespan_ref / self.makespan_big

    @property
    def efficiency(self) -> float:
        return self.speedup / self.processors_big

    def to_dict(self) -> dict:
        return {
            "processors_ref": self.processors_ref,
            "processors_big": self.processors_big,
            "makespan_ref": self.makespan_ref,
            "makespan_big": self.makespan_big,
            "speedup": self.speedup,
            "efficiency": self.efficiency,
        }


def compare_runs(ref, big) -> ComparisonReport:
    """Speedup/efficiency of a `big` run against a small reference run of the
    same workload: speedup = P_ref * makespan_ref / makespan_big.

    Accepts anything exposing `processors` and `makespan` (simulation results,
    live run metrics).
    """
    p_ref, mk_ref = int(ref.processors), float(ref.makespan)
    p_big, mk_big = int(big.processors), float(big.makespan)
    if p_ref < 1 or p_big < 1:
        raise InvalidComparison("both runs need at least one processor")
    if mk_ref <= 0 or mk_big <= 0:
        raise InvalidComparison("both runs need a positive makespan")
    return ComparisonReport(p_ref, p_big, mk_ref, mk_big)


@dataclass
class RunMetrics:
    """Live-run summary in the same shape compare_runs consumes."""

    processors: int
    makespan: float
    n_tasks: int = 0
    busy_time: float = 0.0

    @property
    def efficiency(self) -> float:
        if self.makespan <= 0 or self.processors <= 0:
            return 0.0
        return self.busy_time / (self.processors * self.makespan)

    @property
    def throughput(self) -> float:
        return self.n_tasks / self.makespan if self.makespan > 0 else 0.0


# --- asyncio service ------------------------------------------------------------


class _Connection(asyncio.Protocol):
    """One inbound connection; resolves into a worker or client at Register."""

    def __init__(self, server: "DispatcherServer") -> None:
        self.server = server
        self.transport: Optional[asyncio.Transport] = None
        self.decoder = FrameDecoder()
        self.peer_id: Optional[int] = None
        self.role: Optional[Role] = None

    def connection_made(self, transport: asyncio.BaseTransport) -> None:
        self.transport = transport  # type: ignore[assignment]
        sock = transport.get_extra_info("socket")
        if sock is not None:
            import socket as _socket

            sock.setsockopt(_socket.IPPROTO_TCP, _socket.TCP_NODELAY, 1)

    def data_received(self, data: bytes) -> None:
        n_frames = 0
        try:
            for sender, msg in self.decoder.feed(data):
                n_frames += 1
                self.server.handle_message(self, sender, msg)
        except ProtocolError as exc:
            log.warning("protocol error from %s: %s", self.peer_id, exc)
            if self.transport is not None:
                self.transport.close()
        finally:
            self.server._account_rx(len(data), n_frames)

    def connection_lost(self, exc: Optional[Exception]) -> None:
        self.server.connection_closed(self)


class DispatcherServer:
    """Single-loop dispatch service over the binary protocol."""

    def __init__(self, core: DispatcherCore, host: str = "127.0.0.1",
                 port: int = 0, heartbeat_interval: float = 5.0,
                 link_mbps: Optional[float] = None,
                 shutdown_on_drain: bool = False) -> None:
        self.core = core
        self.host = host
        self.port = port
        self.heartbeat_interval = heartbeat_interval
        self.link_mbps = link_mbps
        self.shutdown_on_drain = shutdown_on_drain
        self._server: Optional[asyncio.AbstractServer] = None
        self._worker_conns: dict[int, _Connection] = {}
        self._push_scheduled = False
        self._stopping = asyncio.Event()
        self._maintenance_task: Optional[asyncio.Task] = None
        # token bucket for aggregate (rx+tx) link emulation
        self._tokens = 0.0
        self._bucket_rate = (link_mbps or 0.0) * 1e6 / 8.0
        self._bucket_cap = max(self._bucket_rate * 0.05, 65536.0)
        self._last_refill = 0.0
        self._txq: deque[tuple[_Connection, bytes, float]] = deque()
        self._pump_handle: Optional[asyncio.TimerHandle] = None

    # ---- lifecycle -------------------------------------------------------

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._tokens = self._bucket_cap
        self._last_refill = loop.time()
        self._server = await loop.create_server(
            lambda: _Connection(self), self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._maintenance_task = asyncio.create_task(self._maintenance())
        log.info("dispatcher %s listening on %s:%d (run %s)",
                 self.core.run_id, self.host, self.port, self.core.run_id)

    async def serve_forever(self) -> None:
        await self._stopping.wait()
        await self._shutdown()

    async def _shutdown(self) -> None:
        if self._maintenance_task is not None:
            self._maintenance_task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for conn in list(self._worker_conns.values()):
            if conn.transport is not None:
                conn.transport.close()
        if self.core.journal is not None:
            self.core.journal.close()

    def request_stop(self) -> None:
        self._stopping.set()

    async def _maintenance(self) -> None:
        """Heartbeat supervision plus periodic journal flushing."""
        timeout_ns = int(self.heartbeat_interval * 3 * 1e9)
        flush_every = max(1, int(self.heartbeat_interval * 50))  # ~20 ms ticks
        tick = 0
        while True:
            await asyncio.sleep(0.02)
            tick += 1
            if self.core.journal is not None and self.core.journal.buffered:
                self.core.journal.flush()
            if tick % flush_every == 0:
                for worker_id in self.core.stale_workers(timeout_ns):
                    log.warning("worker %d missed heartbeats; dropping",
                                worker_id)
                    conn = self._worker_conns.pop(worker_id, None)
                    self.core.worker_lost(worker_id, "heartbeat-timeout")
                    if conn is not None and conn.transport is not None:
                        conn.peer_id = None  # already cleaned up
                        conn.transport.close()
                    self._schedule_push()

    # ---- link emulation ---------------------------------------------------
    #
    # The bucket debits the *modeled* wire cost of each frame, not the raw
    # byte count: payload scaled by the per-MSS header tax plus half the
    # fixed per-exchange overhead from the calibrated cost model (the other
    # half is paid by the peer's frame of the exchange).  This is what makes
    # per-message overhead — and therefore bundling — visible on an emulated
    # slow link the same way it is on a real one.

    def _frame_cost(self, n_bytes: int, n_frames: int = 1) -> float:
        return n_bytes * _WIRE_BYTE_FACTOR + n_frames * _WIRE_FRAME_FIXED

    def _account_rx(self, n: int, n_frames: int) -> None:
        if self._bucket_rate > 0 and n > 0:
            # received traffic shares the same emulated link
            self._tokens -= self._frame_cost(n, n_frames)

    def _send(self, conn: _Connection, data: bytes) -> None:
        if conn.transport is None or conn.transport.is_closing():
            return
        if self._bucket_rate <= 0:
            conn.transport.write(data)
            return
        self._txq.append((conn, data, self._frame_cost(len(data))))
        self._pump()

    def _pump(self) -> None:
        loop = asyncio.get_running_loop()
        now = loop.time()
        self._tokens = min(self._bucket_cap,
                           self._tokens + (now - self._last_refill)
                           * self._bucket_rate)
        self._last_refill = now
        # Debit-after-send: a frame goes out whenever the balance is positive
        # and may drive it negative, delaying everything behind it.  This
        # keeps the long-run rate exact for frames of any size — a frame
        # bigger than the bucket would otherwise wait forever.
        while self._txq and self._tokens > 0:
            conn, data, cost = self._txq.popleft()
            self._tokens -= cost
            if conn.transport is not None and not conn.transport.is_closing():
                conn.transport.write(data)
        if self._txq and self._pump_handle is None:
            delay = max(-self._tokens / self._bucket_rate, 0.001)

            def fire() -> None:
                self._pump_handle = None
                self._pump()

            self._pump_handle = loop.call_later(delay, fire)

    # ---- message handling --------------------------------------------------

    def handle_message(self, conn: _Connection, sender: int, msg) -> None:
        kind = type(msg)
        if kind is Result:
            self.core.touch_worker(sender)
            for result in msg.results:
                self.core.complete(result)
            self._schedule_push()
        elif kind is TaskRequest:
            self.core.touch_worker(sender)
            self._serve_pull(conn, sender, msg.max_tasks)
        elif kind is Heartbeat:
            self.core.touch_worker(sender)
        elif kind is Register:
            self._register(conn, sender, msg)
        elif kind is Submit:
            self._submit(conn, sender, msg)
        elif kind is StatusQuery:
            payload = json.dumps(self.core.stats(),
                                 separators=(",", ":")).encode()
            self._send(conn, proto.encode_frame(0, StatusReply(payload)))
        elif kind is Shutdown:
            log.info("shutdown requested by %d (drain=%s)", sender, msg.drain)
            if msg.drain:
                self.shutdown_on_drain = True
                self._maybe_stop()
            else:
                self.request_stop()
        else:
            log.warning("unexpected %s from %d", kind.__name__, sender)

    def _register(self, conn: _Connection, sender: int, msg: Register) -> None:
        conn.role = msg.role
        if msg.role is Role.WORKER:
            try:
                self.core.register_worker(sender, msg.cores, msg.mode, msg.tag)
            except ValueError as exc:
                log.warning("rejecting register from %d: %s", sender, exc)
                if conn.transport is not None:
                    conn.transport.close()
                return
            conn.peer_id = sender
            self._worker_conns[sender] = conn
        info = json.dumps({
            "run_id": self.core.run_id,
            "heartbeat_interval": self.heartbeat_interval,
        }).encode()
        self._send(conn, proto.encode_frame(
            0, Ack(MsgKind.REGISTER, self.core.epoch_ns, info)))
        if msg.role is Role.WORKER and msg.mode is DispatchMode.PUSH:
            self._schedule_push()

    def _submit(self, conn: _Connection, sender: int, msg: Submit) -> None:
        statuses = self.core.submit(msg.specs)
        if self.core.journal is not None:
            self.core.journal.flush()  # accepted work must survive a crash
        self._send(conn, proto.encode_frame(
            0, SubmitReply(msg.seq, tuple(statuses))))
        self._schedule_push()

    def _serve_pull(self, conn: _Connection, sender: int,
                    max_tasks: int) -> None:
        try:
            records, ts = self.core.next_assignment(sender, max_tasks)
        except KeyError:
            log.warning("task request from unregistered %d", sender)
            return
        w = self.core.workers[sender]
        if w.suspended:
            self._send(conn, proto.encode_frame(0, Suspend()))
            return
        if records:
            self._send(conn, self._dispatch_frame(records, ts))
        # otherwise the request stays parked until work arrives

    # ---- push delivery -----------------------------------------------------

    def _dispatch_frame(self, records: list[TaskRecord], ts: int) -> bytes:
        if len(records) == 1:
            body = _U64.pack(ts) + records[0].raw
            return frame_raw(0, MsgKind.TASK_DISPATCH, body)
        parts = [_U64.pack(ts), _U16.pack(len(records))]
        parts.extend(rec.raw for rec in records)
        return frame_raw(0, MsgKind.TASK_BUNDLE, b"".join(parts))

    def _schedule_push(self) -> None:
        if self._push_scheduled:
            return
        self._push_scheduled = True
        asyncio.get_running_loop().call_soon(self._push_flush)

    def _push_flush(self) -> None:
        self._push_scheduled = False
        for worker, records, ts in self.core.push_assignments():
            conn = self._worker_conns.get(worker.worker_id)
            if conn is None:
                # connection vanished between loss and cleanup: requeue
                for rec in records:
                    self.core._requeue(rec, "no-connection", front=True)
                    worker.in_flight.pop(rec.spec.task_id, None)
                continue
            self._send(conn, self._dispatch_frame(records, ts))
        self._maybe_stop()

    def _maybe_stop(self) -> None:
        if self.shutdown_on_drain and self.core.drained:
            self.request_stop()

    # ---- connection lifecycle ----------------------------------------------

    def connection_closed(self, conn: _Connection) -> None:
        if conn.peer_id is not None:
            self._worker_conns.pop(conn.peer_id, None)
            self.core.worker_lost(conn.peer_id, "disconnect")
            conn.peer_id = None
            self._schedule_push()


async def run_dispatcher(core: DispatcherCore, host: str, port: int,
                         heartbeat_interval: float = 5.0,
                         link_mbps: Optional[float] = None,
                         shutdown_on_drain: bool = False,
                         ready_cb: Optional[Callable[[DispatcherServer], None]] = None) -> None:
    server = DispatcherServer(core, host, port, heartbeat_interval, link_mbps,
                              shutdown_on_drain)
    await server.start()
    if ready_cb is not None:
        ready_cb(server)
    await server.serve_forever()


def build_resumed_core(journal_path: Path, *, bundle_size: int = 1,
                       max_retries: int = 1, suspend_threshold: int = 3) -> DispatcherCore:
    """Reconstruct dispatcher state from a run journal: done work is kept,
    everything else is requeued in original submission order."""
    st = replay_state(journal_path)
    journal = RunLogWriter(journal_path, st.run_id, st.epoch_ns, resumed=True)
    core = DispatcherCore(bundle_size=bundle_size, max_retries=max_retries,
                          suspend_threshold=suspend_threshold,
                          run_id=st.run_id, epoch_ns=st.epoch_ns,
                          journal=journal)
    core.preload_completed(st.done, st.failed)
    pending = [st.specs[tid] for tid in st.specs
               if tid not in st.done and tid not in st.failed]
    core.submit(pending, journal_event=False)  # already journaled originally
    return core
