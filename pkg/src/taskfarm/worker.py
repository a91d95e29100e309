"""Worker executor: runs tasks for a dispatcher, caching shared inputs.

One worker process serves `cores` concurrent tasks over a single connection.
Commands are either real executables (spawned in a per-task scratch directory
with inputs staged in and outputs copied out) or lightweight builtins:

    @sleep <seconds>          hold a slot for the given time, no process spawn
    @fail <code> [app|comm|failfast]   report a synthetic failure
    @fail-once <marker-path> [app|comm|failfast]   fail once per marker file
    @source <logical> [service_ms]     read the named input end to end

@source reads a cacheable input through the scratch cache (staged once, then
served from local scratch) and a non-cacheable one directly from its source
path, dropping the page cache afterwards so every direct read pays the real
storage cost.  ``service_ms`` adds a per-read service delay to *direct* reads
only — it stands in for the queueing delay of a contended shared filesystem
server, which a single-machine benchmark cannot otherwise reproduce.

Builtins exist because workload replay and fault injection need precise,
process-free task bodies; everything else goes through the real spawn path.

Shared inputs marked cacheable are fetched once into a worker-wide LRU cache
keyed by logical name and hard-linked into task directories; concurrent
first-fetches collapse onto a single source read. Transport failures never
fail a task: results wait in the outbox across reconnects, and the dispatcher
deduplicates. Node-level damage (stale handles, unwritable shared dirs) is
reported as FAIL_FAST so the dispatcher can suspend a sick worker quickly.
"""

from __future__ import annotations

import asyncio
import errno
import json
import logging
import os
import secrets
import shlex
import shutil
import signal
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .proto import (
    Ack, DispatchMode, ErrorClass, FrameDecoder, Heartbeat, InputFile, MsgKind,
    ProtocolError, Register, Result, Role, Shutdown, Suspend, TaskBundle,
    TaskDispatch, TaskRequest, TaskResult, TaskSpec, encode_frame,
)

log = logging.getLogger("taskfarm.worker")

_FAIL_FAST_ERRNOS = {errno.ESTALE, errno.EIO, errno.EROFS}

_FAIL_CLASSES = {"app": ErrorClass.APP, "comm": ErrorClass.COMM,
                 "failfast": ErrorClass.FAIL_FAST}

EXIT_TIMEOUT = 124
EXIT_OUTPUT_STAGING = 125
EXIT_INPUT_STAGING = 126
EXIT_SPAWN = 127


def _read_cold(path: str) -> int:
    """Read a file fully and evict it from the page cache afterwards, so the
    next direct read hits storage again the way an uncached shared-filesystem
    read would."""
    with open(path, "rb") as f:
        size = len(f.read())
        try:
            os.posix_fadvise(f.fileno(), 0, 0, os.POSIX_FADV_DONTNEED)
        except (AttributeError, OSError):  # pragma: no cover
            pass
    return size


@dataclass
class ExecutorConfig:
    host: str = "127.0.0.1"
    port: int = 7075
    cores: int = 1
    mode: DispatchMode = DispatchMode.PUSH
    scratch_dir: Path = field(default_factory=lambda: Path("/tmp/taskfarm"))
    cache_capacity: int = 1 << 30
    prefetch_depth: int = 2
    task_timeout: Optional[float] = None
    fail_fast_patterns: tuple[str, ...] = ("stale nfs handle",
                                           "stale file handle")
    tag: str = ""
    worker_id: Optional[int] = None
    reconnect_max_s: float = 1.0


@dataclass
class _CacheEntry:
    path: Path
    size: int = 0
    refcount: int = 0
    last_used: float = 0.0
    ready: asyncio.Event = field(default_factory=asyncio.Event)
    failed: Optional[str] = None


class ScratchCache:
    """Worker-wide input cache: one source read per logical name, LRU bounded.

    Entries are reserved synchronously (so racing fetches of the same input
    collapse onto one copy), populated in a thread, and only evicted when no
    running task holds a reference."""

    def __init__(self, root: Path, capacity_bytes: int) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.capacity = capacity_bytes
        self.entries: dict[str, _CacheEntry] = {}
        self.total_bytes = 0
        self.source_reads = 0
        self.hits = 0
        self.evictions = 0

    async def acquire(self, f: InputFile) -> Path:
        entry = self.entries.get(f.logical)
        if entry is not None:
            entry.refcount += 1
            await entry.ready.wait()
            if entry.failed is not None:
                entry.refcount -= 1
                raise OSError(f"cached fetch of {f.logical} failed: "
                              f"{entry.failed}")
            self.hits += 1
            entry.last_used = time.monotonic()
            return entry.path

        safe = f.logical.replace(os.sep, "_")[:80]
        entry = _CacheEntry(
            self.root / f"{abs(hash(f.logical)) & 0xFFFFFFFF:08x}-{safe}",
            refcount=1)
        self.entries[f.logical] = entry
        try:
            size = await asyncio.to_thread(self._copy_in, f.path, entry.path)
        except BaseException as exc:
            entry.failed = str(exc)
            entry.ready.set()
            del self.entries[f.logical]
            raise
        entry.size = size
        entry.last_used = time.monotonic()
        self.total_bytes += size
        self.source_reads += 1
        entry.ready.set()
        self._evict_excess()
        return entry.path

    @staticmethod
    def _copy_in(src: str, dst: Path) -> int:
        shutil.copyfile(src, dst)
        return os.stat(dst).st_size

    def release(self, logical: str) -> None:
        entry = self.entries.get(logical)
        if entry is not None and entry.refcount > 0:
            entry.refcount -= 1
            entry.last_used = time.monotonic()
            if self.total_bytes > self.capacity:
                self._evict_excess()

    def _evict_excess(self) -> None:
        while self.total_bytes > self.capacity:
            idle = [(e.last_used, name) for name, e in self.entries.items()
                    if e.refcount == 0 and e.ready.is_set()]
            if not idle:
                return  # everything pinned; allow temporary overshoot
            _, name = min(idle)
            entry = self.entries.pop(name)
            self.total_bytes -= entry.size
            self.evictions += 1
            try:
                entry.path.unlink()
            except OSError:
                pass

    def stats(self) -> dict:
        return {
            "entries": len(self.entries),
            "bytes": self.total_bytes,
            "source_reads": self.source_reads,
            "hits": self.hits,
            "evictions": self.evictions,
        }


class TaskRunner:
    """Executes one task spec to a TaskResult; never raises."""

    def __init__(self, config: ExecutorConfig, cache: ScratchCache,
                 worker_id: int) -> None:
        self.config = config
        self.cache = cache
        self.worker_id = worker_id
        self.tasks_dir = Path(config.scratch_dir) / "tasks"
        self.tasks_dir.mkdir(parents=True, exist_ok=True)
        self.epoch_ns = 0  # set after registration
        self.tasks_run = 0
        self.spawns = 0

    def _now(self) -> int:
        return time.time_ns() - self.epoch_ns

    async def run(self, spec: TaskSpec, dispatched_ns: int) -> TaskResult:
        self.tasks_run += 1
        started = max(self._now(), dispatched_ns)  # guard against clock skew
        if spec.command.startswith("@"):
            code, cls, detail = await self._run_builtin(spec)
        else:
            code, cls, detail = await self._run_process(spec)
        finished = max(self._now(), started)
        return TaskResult(spec.task_id, code, cls, self.worker_id,
                          dispatched_ns, started, finished, detail)

    async def _run_builtin(self, spec: TaskSpec) -> tuple[int, ErrorClass, str]:
        argv = spec.command.split()
        op = argv[0]
        try:
            if op == "@sleep":
                seconds = float(argv[1]) if len(argv) > 1 else 0.0
                if seconds > 0:
                    await asyncio.sleep(seconds)
                return 0, ErrorClass.NONE, ""
            if op == "@fail":
                code = int(argv[1]) if len(argv) > 1 else 1
                cls = _FAIL_CLASSES[argv[2] if len(argv) > 2 else "app"]
                return (code or 1), cls, "injected failure"
            if op == "@fail-once":
                marker = Path(argv[1])
                cls = _FAIL_CLASSES[argv[2] if len(argv) > 2 else "app"]
                if marker.exists():
                    return 0, ErrorClass.NONE, "retry succeeded"
                marker.parent.mkdir(parents=True, exist_ok=True)
                marker.touch()
                return 1, cls, "first attempt fails"
            if op == "@source":
                logical = argv[1]
                service_s = float(argv[2]) / 1e3 if len(argv) > 2 else 0.0
                for f in spec.inputs:
                    if f.logical != logical:
                        continue
                    if f.cacheable:
                        path = await self.cache.acquire(f)
                        try:
                            size = len(await asyncio.to_thread(
                                path.read_bytes))
                        finally:
                            self.cache.release(logical)
                        return 0, ErrorClass.NONE, f"{size} bytes (scratch)"
                    if service_s > 0:
                        await asyncio.sleep(service_s)
                    size = await asyncio.to_thread(_read_cold, f.path)
                    return 0, ErrorClass.NONE, f"{size} bytes (direct)"
                return 1, ErrorClass.APP, f"no input named {logical!r}"
            return 1, ErrorClass.APP, f"unknown builtin {op!r}"
        except (IndexError, KeyError, ValueError) as exc:
            return 1, ErrorClass.APP, f"bad builtin args: {exc}"
        except OSError as exc:
            return self._classify_oserror(exc, EXIT_INPUT_STAGING)

    def _classify_oserror(self, exc: OSError,
                          code: int) -> tuple[int, ErrorClass, str]:
        if exc.errno in _FAIL_FAST_ERRNOS or any(
                p in str(exc).lower() for p in self.config.fail_fast_patterns):
            return code, ErrorClass.FAIL_FAST, str(exc)
        return code, ErrorClass.APP, str(exc)

    async def _run_process(self, spec: TaskSpec) -> tuple[int, ErrorClass, str]:
        task_dir = self.tasks_dir / spec.task_id.hex()
        task_dir.mkdir(parents=True, exist_ok=True)
        held: list[str] = []
        try:
            try:
                for f in spec.inputs:
                    dst = task_dir / f.logical
                    if f.cacheable:
                        src = await self.cache.acquire(f)
                        held.append(f.logical)
                        try:
                            os.link(src, dst)
                        except OSError:
                            await asyncio.to_thread(shutil.copyfile, src, dst)
                    else:
                        await asyncio.to_thread(shutil.copyfile, f.path, dst)
            except OSError as exc:
                return self._classify_oserror(exc, EXIT_INPUT_STAGING)
            if spec.payload:
                (task_dir / "payload.bin").write_bytes(spec.payload)

            try:
                argv = shlex.split(spec.command)
                proc = await asyncio.create_subprocess_exec(
                    *argv, cwd=task_dir,
                    stdout=asyncio.subprocess.PIPE,
                    stderr=asyncio.subprocess.PIPE,
                    env={**os.environ,
                         "TASK_ID": spec.task_id.hex(),
                         "TASK_DIR": str(task_dir)},
                )
                self.spawns += 1
            except (OSError, ValueError) as exc:
                return EXIT_SPAWN, ErrorClass.APP, f"spawn failed: {exc}"

            try:
                if self.config.task_timeout:
                    out, err = await asyncio.wait_for(
                        proc.communicate(), self.config.task_timeout)
                else:
                    out, err = await proc.communicate()
            except asyncio.TimeoutError:
                proc.kill()
                await proc.wait()
                return (EXIT_TIMEOUT, ErrorClass.APP,
                        f"timeout after {self.config.task_timeout}s")

            detail = err[-512:].decode(errors="replace")
            if proc.returncode != 0:
                lowered = (err + out).lower()
                cls = ErrorClass.FAIL_FAST if any(
                    p.encode() in lowered
                    for p in self.config.fail_fast_patterns) else ErrorClass.APP
                return proc.returncode, cls, detail

            for f in spec.outputs:
                src = task_dir / f.logical
                if not src.exists():
                    return (EXIT_OUTPUT_STAGING, ErrorClass.APP,
                            f"output {f.logical!r} was not produced")
                try:
                    Path(f.path).parent.mkdir(parents=True, exist_ok=True)
                    await asyncio.to_thread(shutil.copyfile, src, f.path)
                except OSError as exc:
                    code, _, msg = self._classify_oserror(
                        exc, EXIT_OUTPUT_STAGING)
                    return code, ErrorClass.FAIL_FAST, msg
            return 0, ErrorClass.NONE, detail
        finally:
            for logical in held:
                self.cache.release(logical)
            await asyncio.to_thread(shutil.rmtree, task_dir,
                                    ignore_errors=True)


class WorkerSession:
    """Connection management and the task pump for one worker process."""

    def __init__(self, config: ExecutorConfig) -> None:
        self.config = config
        self.worker_id = config.worker_id or (secrets.randbits(63) | 1)
        self.cache = ScratchCache(Path(config.scratch_dir) / "cache",
                                  config.cache_capacity)
        self.runner = TaskRunner(config, self.cache, self.worker_id)
        self.queue: asyncio.Queue[tuple[TaskSpec, int]] = asyncio.Queue()
        self.outbox: list[TaskResult] = []
        self.running = 0
        self._outbox_event = asyncio.Event()
        self._writer: Optional[asyncio.StreamWriter] = None
        self._suspended = False
        self._shutdown = False
        self._drain = False
        self._pull_pending = False
        self._heartbeat_s = 5.0

    # ---- main loop -------------------------------------------------------

    async def run(self) -> None:
        try:
            asyncio.get_running_loop().add_signal_handler(
                signal.SIGTERM, self._on_sigterm)
        except (NotImplementedError, RuntimeError):  # pragma: no cover
            pass
        runners = [asyncio.create_task(self._runner_loop())
                   for _ in range(self.config.cores)]
        backoff = 0.05
        try:
            while not self._shutdown:
                try:
                    await self._serve_connection()
                    backoff = 0.05
                except (OSError, asyncio.IncompleteReadError,
                        ProtocolError) as exc:
                    if self._shutdown:
                        break
                    log.info("connection lost (%s); retrying", exc)
                    await asyncio.sleep(backoff)
                    backoff = min(backoff * 2, self.config.reconnect_max_s)
        finally:
            for t in runners:
                t.cancel()
            await asyncio.gather(*runners, return_exceptions=True)
            self.write_stats()

    def _on_sigterm(self) -> None:
        """Exit cleanly on SIGTERM so counters land in the stats file."""
        self._shutdown = True
        if self._writer is not None:
            self._writer.close()

    async def _serve_connection(self) -> None:
        reader, writer = await asyncio.open_connection(self.config.host,
                                                       self.config.port)
        try:
            writer.write(encode_frame(self.worker_id, Register(
                Role.WORKER, self.config.mode, self.config.cores,
                self.config.tag)))
            await writer.drain()
            decoder = FrameDecoder()
            msg = await self._next_message(reader, decoder)
            if not isinstance(msg, Ack) or msg.acked_kind != MsgKind.REGISTER:
                raise ProtocolError(f"expected Register ack, got {msg}")
            self.runner.epoch_ns = msg.value
            info = json.loads(msg.info or b"{}")
            self._heartbeat_s = float(info.get("heartbeat_interval", 5.0))
            self._writer = writer
            self._suspended = False
            self._outbox_event.set()  # flush anything queued while offline

            flusher = asyncio.create_task(self._flusher(writer))
            beater = asyncio.create_task(self._heartbeats(writer))
            try:
                await self._read_loop(reader, decoder)
            finally:
                self._writer = None
                flusher.cancel()
                beater.cancel()
                await asyncio.gather(flusher, beater, return_exceptions=True)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (OSError, asyncio.IncompleteReadError):
                pass

    @staticmethod
    async def _next_message(reader: asyncio.StreamReader,
                            decoder: FrameDecoder):
        while True:
            data = await reader.read(65536)
            if not data:
                raise ConnectionResetError("dispatcher closed the connection")
            for _, msg in decoder.feed(data):
                return msg

    async def _read_loop(self, reader: asyncio.StreamReader,
                         decoder: FrameDecoder) -> None:
        self._maybe_request_work()
        # First pass feeds nothing: it flushes frames that arrived in the
        # same segment as the Register ack and are still buffered.
        data = b""
        while True:
            for _, msg in decoder.feed(data):
                if isinstance(msg, TaskDispatch):
                    self._pull_pending = False
                    self.queue.put_nowait((msg.spec, msg.dispatched_ns))
                elif isinstance(msg, TaskBundle):
                    self._pull_pending = False
                    for spec in msg.specs:
                        self.queue.put_nowait((spec, msg.dispatched_ns))
                elif isinstance(msg, Suspend):
                    self._on_suspend()
                elif isinstance(msg, Shutdown):
                    self._shutdown = True
                    self._drain = msg.drain
                    if not msg.drain:
                        return
                    await self._drain_and_exit()
                    return
                elif isinstance(msg, Heartbeat):
                    pass
                else:
                    log.warning("unexpected %s", type(msg).__name__)
            data = await reader.read(65536)
            if not data:
                raise ConnectionResetError("dispatcher closed the connection")

    def _on_suspend(self) -> None:
        """Dispatcher benched this worker: drop queued work (it was requeued
        on the other side) but let running tasks finish."""
        self._suspended = True
        self._pull_pending = False
        dropped = 0
        while not self.queue.empty():
            self.queue.get_nowait()
            dropped += 1
        if dropped:
            log.info("suspended; dropped %d locally queued tasks", dropped)

    async def _drain_and_exit(self) -> None:
        while self.running or not self.queue.empty() or self.outbox:
            if self.outbox:
                self._outbox_event.set()
            await asyncio.sleep(0.01)

    # ---- task execution ----------------------------------------------------

    async def _runner_loop(self) -> None:
        while True:
            spec, dispatched_ns = await self.queue.get()
            self.running += 1
            try:
                result = await self.runner.run(spec, dispatched_ns)
            except Exception as exc:  # defensive: runner should not raise
                log.exception("task %s crashed the runner", spec.task_id.hex())
                result = TaskResult(
                    spec.task_id, 1, ErrorClass.APP, self.worker_id,
                    dispatched_ns, dispatched_ns, self.runner._now(),
                    f"executor bug: {exc}")
            finally:
                self.running -= 1
            self.outbox.append(result)
            self._outbox_event.set()

    async def _flusher(self, writer: asyncio.StreamWriter) -> None:
        """Batch results completed close together into single frames."""
        while True:
            await self._outbox_event.wait()
            self._outbox_event.clear()
            if not self.outbox:
                continue
            batch = tuple(self.outbox)
            self.outbox.clear()
            try:
                writer.write(encode_frame(self.worker_id, Result(batch)))
                await writer.drain()
            except (OSError, ConnectionError):
                # connection died mid-send; keep results for the next session
                self.outbox[0:0] = batch
                raise
            self._maybe_request_work()

    def _maybe_request_work(self) -> None:
        if (self.config.mode is not DispatchMode.PULL or self._suspended
                or self._shutdown or self._pull_pending
                or self._writer is None):
            return
        outstanding = self.running + self.queue.qsize()
        want = self.config.cores + self.config.prefetch_depth - outstanding
        if want > 0:
            self._pull_pending = True
            self._writer.write(encode_frame(self.worker_id, TaskRequest(want)))

    async def _heartbeats(self, writer: asyncio.StreamWriter) -> None:
        while True:
            await asyncio.sleep(self._heartbeat_s)
            writer.write(encode_frame(self.worker_id, Heartbeat()))
            await writer.drain()
            # re-arm pull in case a parked request was lost to a reconnect
            self._pull_pending = False
            self._maybe_request_work()

    # ---- reporting -----------------------------------------------------------

    def write_stats(self) -> None:
        doc = {
            "worker_id": self.worker_id,
            "cores": self.config.cores,
            "tasks_run": self.runner.tasks_run,
            "spawns": self.runner.spawns,
            "cache": self.cache.stats(),
        }
        path = Path(self.config.scratch_dir) / f"worker-{self.worker_id}.json"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(doc, indent=2))
        except OSError as exc:
            log.warning("could not write stats file: %s", exc)


def run_worker(config: ExecutorConfig) -> None:
    asyncio.run(WorkerSession(config).run())
