"""End-to-end runs: real sockets, real worker processes, fault injection."""

import asyncio
import time
from pathlib import Path

import pytest

from taskfarm.bench.harness import LiveCluster, sleep_specs, task_id_for
from taskfarm.client import DispatcherClient
from taskfarm.dispatch import DispatcherCore, DispatcherServer, build_resumed_core
from taskfarm.proto import TaskSpec
from taskfarm.provision import LocalProvider
from taskfarm.runlog import read_runlog, replay_state

pytestmark = pytest.mark.live


async def eventually(predicate, timeout: float, what: str) -> None:
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise TimeoutError(f"timed out waiting for {what}")
        await asyncio.sleep(0.02)


class TestPushCluster:
    def test_end_to_end_with_fault_injection(self, tmp_path):
        async def main():
            async with LiveCluster(2, 1, mode="push",
                                   scratch_root=tmp_path / "s") as cluster:
                core = cluster.core

                batch = await cluster.run_sleep_batch(40)
                assert batch.n_failed == 0
                assert core.n_done == 40

                # payload rides submitter -> dispatcher -> worker task dir
                payload_spec = TaskSpec(
                    task_id_for(0, stream=90),
                    "/bin/sh -c 'test \"$(cat payload.bin)\" = hello'",
                    b"hello")
                batch = await cluster.run_batch([payload_spec])
                assert batch.n_failed == 0

                # an application failure is retried once, then final
                batch = await cluster.run_batch(
                    [TaskSpec(task_id_for(0, stream=91), "@fail 7 app")])
                assert batch.n_failed == 1
                assert core.n_failed == 1

                # a transient failure succeeds on its retry
                marker = tmp_path / "flaky.marker"
                batch = await cluster.run_batch(
                    [TaskSpec(task_id_for(0, stream=92),
                              f"@fail-once {marker}")])
                assert batch.n_failed == 0
                assert core.n_done == 42
                assert core.n_requeues >= 1

                st = core.stats()
                assert st["submitted"] == 43
                assert st["drained"] is True

        asyncio.run(main())

    def test_pull_mode_drains_batch(self, tmp_path):
        async def main():
            async with LiveCluster(2, 1, mode="pull",
                                   scratch_root=tmp_path / "s") as cluster:
                batch = await cluster.run_sleep_batch(40)
                assert batch.n_failed == 0
                assert cluster.core.n_done == 40

        asyncio.run(main())


class TestFailFastSuspension:
    def test_bad_worker_is_benched_without_losing_tasks(self, tmp_path):
        # The script fails fast only on the first worker (its scratch path
        # carries the block name); the second worker runs tasks normally.
        script = tmp_path / "flaky_host.sh"
        script.write_text(
            "#!/bin/sh\n"
            "case \"$TASK_DIR\" in\n"
            "  */bench-0/*) echo 'read: stale file handle' >&2; exit 5;;\n"
            "  *) sleep 0.3;;\n"
            "esac\n")
        script.chmod(0o755)

        async def main():
            async with LiveCluster(
                    2, 1, suspend_threshold=3,
                    scratch_root=tmp_path / "s") as cluster:
                core = cluster.core
                specs = [TaskSpec(task_id_for(i, stream=1), str(script))
                         for i in range(6)]
                batch = await asyncio.wait_for(cluster.run_batch(specs), 60)
                assert batch.n_failed == 0
                assert core.n_done == 6
                suspended = [w for w in core.workers.values() if w.suspended]
                assert len(suspended) == 1
                # fail-fast attempts were never charged against the tasks
                assert core.n_failed == 0

        asyncio.run(main())


class TestWorkerLoss:
    def test_killed_worker_tasks_requeue_and_finish(self, tmp_path):
        async def main():
            async with LiveCluster(2, 1,
                                   scratch_root=tmp_path / "s") as cluster:
                specs = sleep_specs(6, 0.5, stream=1)
                bg = asyncio.create_task(cluster.run_batch(specs))
                await asyncio.sleep(0.3)  # both workers now hold a task
                cluster.handles[0].kill()
                batch = await asyncio.wait_for(bg, 60)
                assert batch.n_failed == 0
                assert cluster.core.n_done == 6
                assert cluster.core.n_requeues >= 1

        asyncio.run(main())


class TestReconnect:
    def test_worker_survives_dispatcher_restart(self, tmp_path):
        async def main():
            core = DispatcherCore()
            server = DispatcherServer(core, "127.0.0.1", 0,
                                      heartbeat_interval=1.0)
            await server.start()
            port = server.port
            provider = LocalProvider(scratch_root=tmp_path / "s")
            handles = provider.start(1, 1, "127.0.0.1", port, tag="rc")
            try:
                await eventually(lambda: len(core.workers) == 1, 30,
                                 "worker registration")
                async with DispatcherClient("127.0.0.1", port) as client:
                    await client.submit(sleep_specs(10, stream=1))
                    await eventually(lambda: core.n_done == 10, 30,
                                     "first batch")

                await server._shutdown()
                await eventually(lambda: len(core.workers) == 0, 10,
                                 "stale worker cleanup")

                server = DispatcherServer(core, "127.0.0.1", port,
                                          heartbeat_interval=1.0)
                await server.start()
                await eventually(lambda: len(core.workers) == 1, 30,
                                 "worker re-registration")
                async with DispatcherClient("127.0.0.1", port) as client:
                    await client.submit(sleep_specs(10, stream=2))
                    await eventually(lambda: core.n_done == 20, 30,
                                     "second batch")
            finally:
                provider.stop(handles, grace_s=3.0)
                await server._shutdown()

        asyncio.run(main())


class TestResume:
    def test_resume_completes_only_pending_work(self, tmp_path):
        journal = tmp_path / "run.jsonl"
        quick = [TaskSpec(task_id_for(i, stream=1), "@sleep")
                 for i in range(3)]
        slow = [TaskSpec(task_id_for(i, stream=2), "@sleep 1.2")
                for i in range(3)]

        async def first_run():
            cluster = LiveCluster(1, 1, journal_path=journal,
                                  scratch_root=tmp_path / "s1")
            await cluster.__aenter__()
            try:
                bg = asyncio.create_task(cluster.run_batch(quick + slow))
                await eventually(lambda: cluster.core.n_done >= 3, 30,
                                 "quick tasks to finish")
                bg.cancel()
            finally:
                await cluster.__aexit__(None, None, None)

        asyncio.run(first_run())

        state = replay_state(journal)
        assert {s.task_id for s in quick} <= state.done
        assert len(state.pending) == 6 - len(state.done)

        async def resumed_run():
            core = build_resumed_core(journal)
            assert core.n_done == len(state.done)
            assert core.n_queued == len(state.pending)
            server = DispatcherServer(core, "127.0.0.1", 0)
            await server.start()
            provider = LocalProvider(scratch_root=tmp_path / "s2")
            handles = provider.start(1, 1, "127.0.0.1", server.port,
                                     tag="res")
            try:
                await eventually(
                    lambda: core.n_done + core.n_failed == 6, 60,
                    "resumed backlog to drain")
                assert core.n_failed == 0
            finally:
                provider.stop(handles, grace_s=3.0)
                await server._shutdown()

        asyncio.run(resumed_run())

        # every task finished exactly once across both runs
        _, events = read_runlog(journal)
        fins = [e for e in events if e["e"] == "fin"]
        assert len(fins) == 6
        final = replay_state(journal)
        assert final.done == {s.task_id for s in quick + slow}
        assert not final.pending
