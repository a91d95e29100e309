"""Worker executor: cache semantics, builtins, real process tasks."""

import asyncio
import os
from pathlib import Path

import pytest

from taskfarm.proto import ErrorClass, InputFile, OutputFile, TaskSpec
from taskfarm.worker import (
    EXIT_INPUT_STAGING, EXIT_OUTPUT_STAGING, EXIT_SPAWN, EXIT_TIMEOUT,
    ExecutorConfig, ScratchCache, TaskRunner,
)


def tid(i: int) -> bytes:
    return i.to_bytes(16, "big")


@pytest.fixture
def scratch(tmp_path):
    return tmp_path / "scratch"


@pytest.fixture
def runner(scratch):
    cfg = ExecutorConfig(scratch_dir=scratch, cores=4)
    cache = ScratchCache(scratch / "cache", capacity_bytes=1 << 20)
    return TaskRunner(cfg, cache, worker_id=7)


def run(coro):
    return asyncio.run(coro)


# ---- scratch cache ----------------------------------------------------------


class TestScratchCache:
    def test_concurrent_acquires_single_source_read(self, tmp_path):
        src = tmp_path / "big.bin"
        src.write_bytes(os.urandom(256 * 1024))
        cache = ScratchCache(tmp_path / "cache", 1 << 30)
        f = InputFile("big", str(src), True)

        async def fetch():
            path = await cache.acquire(f)
            assert path.read_bytes()[:16] == src.read_bytes()[:16]
            cache.release("big")

        async def main():
            await asyncio.gather(*[fetch() for _ in range(32)])

        run(main())
        st = cache.stats()
        assert st["source_reads"] == 1
        assert st["hits"] == 31

    def test_failed_fetch_propagates_and_clears(self, tmp_path):
        cache = ScratchCache(tmp_path / "cache", 1 << 30)
        f = InputFile("missing", str(tmp_path / "nope.bin"), True)

        async def main():
            with pytest.raises(OSError):
                await cache.acquire(f)
            # entry cleared: a later acquire retries the source
            src = tmp_path / "nope.bin"
            src.write_bytes(b"now it exists")
            path = await cache.acquire(f)
            assert path.read_bytes() == b"now it exists"

        run(main())
        assert cache.stats()["source_reads"] == 1

    def test_lru_eviction_respects_refcounts(self, tmp_path):
        cache = ScratchCache(tmp_path / "cache", capacity_bytes=300)
        files = []
        for i in range(3):
            p = tmp_path / f"f{i}"
            p.write_bytes(bytes(200))
            files.append(InputFile(f"f{i}", str(p), True))

        async def main():
            await cache.acquire(files[0])          # pinned (no release)
            await cache.acquire(files[1])
            cache.release("f1")                     # f1 evictable
            await cache.acquire(files[2])           # forces eviction
            st = cache.stats()
            assert "f0" in cache.entries            # pinned survives
            assert "f1" not in cache.entries        # LRU victim
            assert st["evictions"] == 1
            cache.release("f0")
            cache.release("f2")

        run(main())

    def test_all_pinned_overshoots_capacity(self, tmp_path):
        cache = ScratchCache(tmp_path / "cache", capacity_bytes=100)
        for i in range(2):
            p = tmp_path / f"p{i}"
            p.write_bytes(bytes(80))

        async def main():
            await cache.acquire(InputFile("p0", str(tmp_path / "p0"), True))
            await cache.acquire(InputFile("p1", str(tmp_path / "p1"), True))
            assert cache.total_bytes == 160  # overshoot, nothing evictable

        run(main())

    def test_logical_names_with_separators(self, tmp_path):
        src = tmp_path / "x.bin"
        src.write_bytes(b"abc")
        cache = ScratchCache(tmp_path / "cache", 1 << 20)

        async def main():
            path = await cache.acquire(
                InputFile("data/model/x.bin", str(src), True))
            assert path.read_bytes() == b"abc"

        run(main())


# ---- builtins ----------------------------------------------------------------


class TestBuiltins:
    def test_sleep_reports_duration(self, runner):
        spec = TaskSpec(tid(1), "@sleep 0.05")
        res = run(runner.run(spec, dispatched_ns=0))
        assert res.ok
        assert res.finished_ns - res.started_ns >= 40_000_000

    def test_sleep_zero(self, runner):
        res = run(runner.run(TaskSpec(tid(2), "@sleep"), 0))
        assert res.ok
        assert res.exit_code == 0

    def test_fail_classes(self, runner):
        for arg, cls in (("app", ErrorClass.APP), ("comm", ErrorClass.COMM),
                         ("failfast", ErrorClass.FAIL_FAST)):
            res = run(runner.run(TaskSpec(tid(3), f"@fail 9 {arg}"), 0))
            assert not res.ok
            assert res.exit_code == 9
            assert res.error_class is cls

    def test_fail_once_succeeds_second_time(self, runner, tmp_path):
        marker = tmp_path / "marker"
        spec = TaskSpec(tid(4), f"@fail-once {marker}")
        first = run(runner.run(spec, 0))
        assert not first.ok
        assert first.error_class is ErrorClass.APP
        second = run(runner.run(spec, 0))
        assert second.ok

    def test_fail_once_with_comm_class(self, runner, tmp_path):
        marker = tmp_path / "comm-marker"
        spec = TaskSpec(tid(4), f"@fail-once {marker} comm")
        first = run(runner.run(spec, 0))
        assert not first.ok
        assert first.error_class is ErrorClass.COMM
        second = run(runner.run(spec, 0))
        assert second.ok

    def test_unknown_builtin_is_app_failure(self, runner):
        res = run(runner.run(TaskSpec(tid(5), "@frobnicate"), 0))
        assert not res.ok
        assert res.error_class is ErrorClass.APP

    def test_source_cacheable_and_direct(self, runner, tmp_path):
        src = tmp_path / "input.bin"
        src.write_bytes(os.urandom(4096))
        cached = TaskSpec(tid(6), "@source data",
                          inputs=(InputFile("data", str(src), True),))
        direct = TaskSpec(tid(7), "@source data",
                          inputs=(InputFile("data", str(src), False),))
        r1 = run(runner.run(cached, 0))
        r2 = run(runner.run(direct, 0))
        assert r1.ok and "scratch" in r1.detail
        assert r2.ok and "direct" in r2.detail
        assert runner.cache.stats()["source_reads"] == 1

    def test_timestamps_clamped_to_dispatch(self, runner):
        future = 10**15
        res = run(runner.run(TaskSpec(tid(8), "@sleep"), dispatched_ns=future))
        assert res.started_ns >= future
        assert res.finished_ns >= res.started_ns


# ---- real process tasks -------------------------------------------------------


class TestProcessTasks:
    def test_spawn_success_with_staging(self, runner, tmp_path):
        src = tmp_path / "in.txt"
        src.write_bytes(b"payload-in")
        out_path = tmp_path / "results" / "out.txt"
        spec = TaskSpec(
            tid(10), "/bin/cp in.txt out.txt",
            inputs=(InputFile("in.txt", str(src), False),),
            outputs=(OutputFile("out.txt", str(out_path)),))
        res = run(runner.run(spec, 0))
        assert res.ok, res.detail
        assert out_path.read_bytes() == b"payload-in"

    def test_nonzero_exit_is_app_failure(self, runner):
        res = run(runner.run(TaskSpec(tid(11), "/bin/false"), 0))
        assert not res.ok
        assert res.exit_code == 1
        assert res.error_class is ErrorClass.APP

    def test_spawn_failure_exit_code(self, runner):
        res = run(runner.run(TaskSpec(tid(12), "/no/such/binary"), 0))
        assert res.exit_code == EXIT_SPAWN
        assert not res.ok

    def test_missing_input_is_staging_failure(self, runner, tmp_path):
        spec = TaskSpec(
            tid(13), "/bin/true",
            inputs=(InputFile("gone", str(tmp_path / "gone"), False),))
        res = run(runner.run(spec, 0))
        assert res.exit_code == EXIT_INPUT_STAGING

    def test_missing_output_is_staging_failure(self, runner, tmp_path):
        spec = TaskSpec(
            tid(14), "/bin/true",
            outputs=(OutputFile("never.txt", str(tmp_path / "n.txt")),))
        res = run(runner.run(spec, 0))
        assert res.exit_code == EXIT_OUTPUT_STAGING

    def test_timeout_kills_and_reports(self, scratch):
        cfg = ExecutorConfig(scratch_dir=scratch, task_timeout=0.2)
        cache = ScratchCache(scratch / "cache", 1 << 20)
        runner = TaskRunner(cfg, cache, worker_id=8)
        res = run(runner.run(TaskSpec(tid(15), "/bin/sleep 5"), 0))
        assert res.exit_code == EXIT_TIMEOUT
        assert res.error_class is ErrorClass.APP

    def test_stderr_pattern_marks_fail_fast(self, scratch, tmp_path):
        cfg = ExecutorConfig(scratch_dir=scratch)
        cache = ScratchCache(scratch / "cache", 1 << 20)
        runner = TaskRunner(cfg, cache, worker_id=9)
        script = tmp_path / "nfs.sh"
        script.write_text("#!/bin/sh\necho 'read: Stale NFS handle' >&2\n"
                          "exit 5\n")
        script.chmod(0o755)
        res = run(runner.run(TaskSpec(tid(16), str(script)), 0))
        assert res.exit_code == 5
        assert res.error_class is ErrorClass.FAIL_FAST

    def test_task_dir_cleaned_up(self, runner):
        run(runner.run(TaskSpec(tid(17), "/bin/true"), 0))
        leftovers = list(runner.tasks_dir.iterdir())
        assert leftovers == []

    def test_payload_lands_in_task_dir(self, runner):
        spec = TaskSpec(tid(18), "/bin/sh -c 'test -s payload.bin'",
                        payload=b"\x01\x02\x03")
        res = run(runner.run(spec, 0))
        assert res.ok, res.detail
