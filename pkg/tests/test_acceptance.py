"""Acceptance gate: one test per shipped claim, one printed verdict line each.

Every numbered criterion below pins a user-visible guarantee of this package —
wire-format stability, live dispatch throughput, model/measurement agreement,
failure handling, crash recovery, cache effectiveness.  Each test prints
exactly one line past pytest's capture:

    criterion NN PASS|FAIL  <what was checked>  [elapsed]

so a full run reads as a thirteen-line scoreboard.  Tolerances and reference
operating points are pinned in the asserts; the live checks run real sockets
and real worker processes, the model checks run the discrete-event kernel.

Run:  pytest tests/test_acceptance.py -q
"""

from __future__ import annotations

import asyncio
import json
import random
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from taskfarm import proto
from taskfarm.bench.fsbench import staging_bench
from taskfarm.bench.harness import (
    LiveCluster, bundling_bench, efficiency_bench, payload_bench, sleep_specs,
    task_id_for, throughput_bench,
)
from taskfarm.bench.traces import generate_trace, replay_sim
from taskfarm.client import DispatcherClient
from taskfarm.dispatch import DispatcherServer, build_resumed_core, compare_runs
from taskfarm.perfmodel import engine as eng
from taskfarm.proto import (
    Ack, DispatchMode, ErrorClass, Heartbeat, InputFile, MsgKind, OutputFile,
    Register, Result, Role, Shutdown, StatusQuery, StatusReply, Submit,
    SubmitReply, SubmitStatus, Suspend, TaskBundle, TaskDispatch, TaskRequest,
    TaskResult, TaskSpec, decode_frame, encode_frame,
)
from taskfarm.provision import LocalProvider
from taskfarm.runlog import replay_state

pytestmark = pytest.mark.acceptance

FIXTURES = Path(__file__).parent / "fixtures" / "frames.txt"


# ---- scoreboard plumbing -----------------------------------------------------


@pytest.fixture
def criterion(capsys):
    """Wrap one criterion's asserts; print its verdict past the capture."""

    @contextmanager
    def check(num: int, label: str):
        t0 = time.monotonic()
        try:
            yield
        except BaseException:
            _verdict(capsys, num, label, "FAIL", time.monotonic() - t0)
            raise
        _verdict(capsys, num, label, "PASS", time.monotonic() - t0)

    return check


def _verdict(capsys, num: int, label: str, word: str, elapsed: float) -> None:
    with capsys.disabled():
        print(f"criterion {num:02d} {word}  {label}  [{elapsed:.1f}s]",
              flush=True)


def run_bounded(coro, timeout_s: float):
    """asyncio.run with a hard wall-clock bound so a hang cannot stall the gate."""
    return asyncio.run(asyncio.wait_for(coro, timeout_s))


async def eventually(predicate, timeout: float, what: str) -> None:
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise TimeoutError(f"timed out waiting for {what}")
        await asyncio.sleep(0.02)


# ---- 1. protocol conformance -------------------------------------------------


def _rand_text(r: random.Random, max_len: int) -> str:
    return "".join(chr(r.randrange(32, 0x2FA0))
                   for _ in range(r.randrange(max_len + 1)))


def _rand_spec(r: random.Random) -> TaskSpec:
    payload_cap = 2048 if r.random() < 0.0625 else 48
    return TaskSpec(
        task_id=r.randbytes(16),
        command=_rand_text(r, 48),
        payload=r.randbytes(r.randrange(payload_cap)),
        inputs=tuple(InputFile(_rand_text(r, 12), _rand_text(r, 24),
                               r.random() < 0.5)
                     for _ in range(r.randrange(3))),
        outputs=tuple(OutputFile(_rand_text(r, 12), _rand_text(r, 24))
                      for _ in range(r.randrange(2))),
    )


def _rand_result(r: random.Random) -> TaskResult:
    return TaskResult(
        task_id=r.randbytes(16),
        exit_code=r.randrange(-2**31, 2**31),
        error_class=r.choice(list(ErrorClass)),
        worker_id=r.randrange(2**64),
        dispatched_ns=r.randrange(2**64),
        started_ns=r.randrange(2**64),
        finished_ns=r.randrange(2**64),
        detail=_rand_text(r, 64),
    )


_BUILDERS = (
    lambda r: Register(r.choice(list(Role)), r.choice(list(DispatchMode)),
                       r.randrange(2**32), _rand_text(r, 16)),
    lambda r: TaskDispatch(r.randrange(2**64), _rand_spec(r)),
    lambda r: TaskBundle(r.randrange(2**64),
                         tuple(_rand_spec(r) for _ in range(r.randrange(4)))),
    lambda r: Result(tuple(_rand_result(r) for _ in range(r.randrange(4)))),
    lambda r: Heartbeat(),
    lambda r: Suspend(),
    lambda r: Shutdown(r.random() < 0.5),
    lambda r: Ack(r.choice(list(MsgKind)), r.randrange(2**64),
                  r.randbytes(r.randrange(64))),
    lambda r: TaskRequest(r.randrange(2**32)),
    lambda r: Submit(r.randrange(2**32),
                     tuple(_rand_spec(r) for _ in range(r.randrange(3)))),
    lambda r: SubmitReply(r.randrange(2**32),
                          tuple((r.randbytes(16), r.choice(list(SubmitStatus)))
                                for _ in range(r.randrange(4)))),
    lambda r: StatusQuery(),
    lambda r: StatusReply(r.randbytes(r.randrange(256))),
)


def test_c01_protocol_conformance(criterion):
    with criterion(1, "protocol: 100000 random round-trips + pinned frames"):
        t0 = time.monotonic()
        r = random.Random(17)
        n = 100_000
        kinds_seen = set()
        for i in range(n):
            msg = _BUILDERS[i % len(_BUILDERS)](r)
            sender = r.randrange(2**64)
            sender_out, decoded = decode_frame(encode_frame(sender, msg))
            assert sender_out == sender
            assert decoded == msg
            kinds_seen.add(proto.kind_of(msg))
        assert kinds_seen == {int(k) for k in MsgKind}

        # the pinned single-byte-exact frame everything else is framed like
        assert encode_frame(7, Heartbeat()).hex() == \
            "0900000005" + "0700000000000000"

        rows = 0
        kinds_pinned = set()
        for line in FIXTURES.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, kind, sender_s, hexpart = (p.strip() for p in line.split("|"))
            raw = bytes.fromhex(hexpart)
            got_sender, msg = decode_frame(raw)
            assert got_sender == int(sender_s), name
            assert proto.kind_of(msg) == int(kind), name
            assert encode_frame(got_sender, msg) == raw, name
            rows += 1
            kinds_pinned.add(int(kind))
        assert rows >= 13
        assert kinds_pinned == {int(k) for k in MsgKind}
        assert time.monotonic() - t0 < 60.0


# ---- 2-5. live cluster benchmarks ---------------------------------------------


def test_c02_throughput(criterion):
    with criterion(2, "live throughput >= 1000 tasks/s "
                      "(16 workers, bundle 1, 100K tasks)"):
        out = run_bounded(
            throughput_bench(n_tasks=100_000, workers=16, bundle_size=1),
            180.0)
        assert out["n_failed"] == 0
        assert out["throughput"] >= 1000.0, out["throughput"]


def test_c03_bundling_gain(criterion):
    with criterion(3, "bundling 10 specs/message >= 2x throughput "
                      "on a thin link"):
        out = run_bounded(bundling_bench(), 900.0)
        assert out["rows"][0]["bundle_size"] == 1
        assert out["rows"][-1]["bundle_size"] == 10
        for row in out["rows"]:
            assert row["n_failed"] == 0
        ratio = out["speedup_vs_first"][-1]
        assert ratio >= 2.0, ratio


def test_c04_payload_scaling(criterion):
    with criterion(4, "throughput(10B) >= 3x throughput(10KiB), "
                      "strictly monotone decay"):
        out = run_bounded(payload_bench(), 900.0)
        rows = out["rows"]
        assert [row["payload_bytes"] for row in rows] == [10, 100, 1024, 10240]
        for row in rows:
            assert row["n_failed"] == 0
        rates = [row["throughput"] for row in rows]
        assert all(a > b for a, b in zip(rates, rates[1:])), rates
        assert rates[0] / rates[-1] >= 3.0, rates


def test_c05_efficiency_curve(criterion):
    with criterion(5, "live efficiency >= 0.90 at 1s tasks, "
                      "non-decreasing over 0.1-4s (64 workers)"):
        out = run_bounded(efficiency_bench(), 600.0)
        rows = out["rows"]
        assert [row["task_s"] for row in rows] == [0.1, 0.5, 1.0, 2.0, 4.0]
        for row in rows:
            assert row["n_failed"] == 0
        effs = [row["efficiency"] for row in rows]
        assert effs[2] >= 0.90, effs
        assert all(b >= a for a, b in zip(effs, effs[1:])), effs


# ---- 6-8. analytic model and simulator ----------------------------------------


def test_c06_model_cross_validation(criterion):
    with criterion(6, "DES efficiency within 0.02 of min(1, r*t/P) "
                      "on a 50-point grid"):
        t0 = time.monotonic()
        for processors in (256, 4096):
            n = 1000 * processors
            for rate in (100.0, 500.0, 1000.0, 2000.0, 5000.0):
                for task_s in (0.5, 1.0, 2.0, 4.0, 8.0):
                    res = eng.des_run(processors, rate, eng.constant(task_s),
                                      n_tasks=n)
                    want = eng.closed_form_efficiency(rate, task_s, processors)
                    assert abs(res.efficiency - want) <= 0.02, \
                        (processors, rate, task_s, res.efficiency, want)
        assert time.monotonic() - t0 <= 120.0


def test_c07_reference_efficiency_points(criterion):
    with criterion(7, "DES reference points 4s@P2048/r1758 and "
                      "8s@P5760/r3186 within 3pp of 0.94"):
        for processors, rate, task_s in ((2048, 1758.0, 4.0),
                                         (5760, 3186.0, 8.0)):
            res = eng.des_run(processors, rate, eng.constant(task_s),
                              n_tasks=5 * processors)
            assert abs(res.efficiency - 0.94) <= 0.03, \
                (processors, res.efficiency)


def test_c08_min_task_length_formula(criterion):
    with criterion(8, "min task length at e=0.9 for 14.3s/28.9s overhead "
                      "-> 129s/260s +/-2s"):
        for overhead_s, want in ((14.3, 129.0), (28.9, 260.0)):
            got = eng.min_task_length_for_efficiency(0.9, overhead_s)
            assert abs(got - want) <= 2.0, (overhead_s, got)


# ---- 9-10. workload replays through the simulator ------------------------------


def test_c09_mars_replay(criterion):
    with criterion(9, "mars trace (49K batches) @P2048/r1758: "
                      "efficiency >= 0.95, speedup 1993 +/-5% vs P=4"):
        trace = generate_trace("mars", seed=0)
        assert len(trace) == 49_000
        big = replay_sim(trace, 2048, 1758.0)
        assert big.efficiency >= 0.95, big.efficiency
        ref = replay_sim(trace, 4, 1758.0)
        rep = compare_runs(ref, big)
        assert abs(rep.speedup - 1993.0) <= 0.05 * 1993.0, rep.speedup


def test_c10_dock_replay_and_ramp_down(criterion):
    with criterion(10, "dock trace (92K) P5760 vs P102: efficiency >= 0.97; "
                       "ramp-down loss >0 varied, =0 constant"):
        trace = generate_trace("dock", seed=0)
        assert len(trace) == 92_000
        big = replay_sim(trace, 5760, 3186.0)
        ref = replay_sim(trace, 102, 3186.0)
        rep = compare_runs(ref, big)
        assert rep.efficiency >= 0.97, rep.efficiency

        spread = eng.lognormal(660.0, 478.8, low=5.8, high=4178.0)
        report = eng.ramp_down_loss(spread, 5760, 92_000, 3186.0)
        assert report.loss > 0.0, report
        flat = eng.ramp_down_loss(eng.constant(660.0), 5760, 92_000, 3186.0)
        assert flat.loss == 0.0, flat


# ---- 11. failure policy, live ---------------------------------------------------


def test_c11_failure_policy(criterion, tmp_path):
    with criterion(11, "fail-fast worker suspended and drained losslessly; "
                       "comm errors retried to success"):
        # Fails fast only on the first worker (scratch path carries the
        # block name); the second worker runs everything normally.
        script = tmp_path / "sick_host.sh"
        script.write_text(
            "#!/bin/sh\n"
            "case \"$TASK_DIR\" in\n"
            "  */bench-0/*) echo 'read: stale file handle' >&2; exit 5;;\n"
            "  *) sleep 0.05;;\n"
            "esac\n")
        script.chmod(0o755)

        async def main():
            async with LiveCluster(2, 2, suspend_threshold=3,
                                   scratch_root=tmp_path / "s") as cluster:
                core = cluster.core
                specs = [TaskSpec(task_id_for(i, stream=111), str(script))
                         for i in range(12)]
                batch = await cluster.run_batch(specs)
                assert batch.n_failed == 0
                assert core.n_done == 12
                suspended = [w for w in core.workers.values() if w.suspended]
                assert len(suspended) == 1
                # bounced attempts and the in-flight handoff were requeues,
                # never charges against the tasks
                assert core.n_requeues >= 3
                assert core.n_failed == 0

                comm = [TaskSpec(task_id_for(i, stream=112),
                                 f"@fail-once {tmp_path}/m{i} comm")
                        for i in range(8)]
                batch = await cluster.run_batch(comm)
                assert batch.n_failed == 0
                assert core.n_done == 20
                assert core.n_failed == 0
                assert core.stats()["drained"] is True

        run_bounded(main(), 300.0)


# ---- 12. crash-restart, live -----------------------------------------------------


def _read_ready(proc: subprocess.Popen, timeout_s: float = 30.0) -> dict:
    deadline = time.monotonic() + timeout_s
    assert proc.stdout is not None
    while time.monotonic() < deadline:
        line = proc.stdout.readline()
        if not line:
            raise RuntimeError("dispatcher exited before announcing ready")
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            continue
        if doc.get("event") == "ready":
            return doc
    raise TimeoutError("no ready line from dispatcher")


def test_c12_crash_restart(criterion, tmp_path):
    with criterion(12, "dispatcher SIGKILL mid 10K-task run; resume finishes "
                       "exactly the unfinished remainder"):
        n = 10_000
        kill_after = int(np.random.default_rng(20260816).integers(2000, 8000))
        specs = sleep_specs(n, stream=12)
        all_ids = {s.task_id for s in specs}
        log_dir = tmp_path / "logs"

        proc = subprocess.Popen(
            [sys.executable, "-m", "taskfarm", "serve",
             "--address", "127.0.0.1:0", "--log-dir", str(log_dir)],
            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        provider = LocalProvider(scratch_root=tmp_path / "s1")
        handles: list = []
        try:
            ready = _read_ready(proc)
            port, run_id = ready["port"], ready["run_id"]
            journal = log_dir / f"{run_id}.jsonl"
            handles = provider.start(4, 1, "127.0.0.1", port, tag="crash")

            async def submit_then_kill():
                async with DispatcherClient("127.0.0.1", port) as client:
                    await client.submit(specs)
                    while True:
                        st = await client.status()
                        if st["done"] >= kill_after:
                            break
                        await asyncio.sleep(0.005)
                proc.kill()
                proc.wait(timeout=10)

            run_bounded(submit_then_kill(), 120.0)

            pre = replay_state(journal)
            assert set(pre.specs) == all_ids   # acked work survived the crash
            assert not pre.failed
            assert 0 < len(pre.done) < n       # it really died mid-run
            remainder = pre.pending
            assert remainder == all_ids - pre.done

            async def resume_on_same_port():
                core = build_resumed_core(journal)
                assert core.n_done == len(pre.done)
                assert core.n_queued == len(remainder)
                server = DispatcherServer(core, "127.0.0.1", port)
                await server.start()   # orphaned workers reconnect to it
                try:
                    await eventually(
                        lambda: core.n_done + core.n_failed >= n, 120,
                        "resumed run to drain")
                    assert core.n_failed == 0
                finally:
                    await server._shutdown()

            asyncio.run(resume_on_same_port())
        finally:
            if handles:
                provider.stop(handles, grace_s=3.0)
            if proc.poll() is None:
                proc.kill()
            if proc.stdout is not None:
                proc.stdout.close()

        post = replay_state(journal)
        assert post.done == all_ids
        assert not post.pending
        assert post.done - pre.done == remainder

        # an uninterrupted run of the same specs lands on the same Done set
        journal2 = tmp_path / "uninterrupted.jsonl"

        async def uninterrupted():
            async with LiveCluster(4, 1, journal_path=journal2,
                                   scratch_root=tmp_path / "s2") as cluster:
                batch = await cluster.run_batch(list(specs))
                assert batch.n_failed == 0

        run_bounded(uninterrupted(), 300.0)
        assert replay_state(journal2).done == post.done == all_ids


# ---- 13. cache effectiveness, live ----------------------------------------------


def test_c13_cache_effectiveness(criterion, tmp_path):
    with criterion(13, "1000 tasks sharing one 32MB input: exactly 1 source "
                       "read; scratch rate > direct rate"):
        out = run_bounded(
            staging_bench(n_tasks=1000, input_bytes=32 << 20, cores=4,
                          shared_dir=tmp_path / "shared",
                          scratch_root=tmp_path / "scratch"),
            900.0)
        for row in out["rows"]:
            assert row["n_failed"] == 0
        cache = out["worker_stats"]["scratch"]["cache"]
        assert cache["source_reads"] == 1, cache
        assert cache["hits"] == 999, cache
        direct_cache = out["worker_stats"]["direct"]["cache"]
        assert direct_cache["source_reads"] == 0, direct_cache
        assert out["rate_scratch"] > out["rate_direct"], out
