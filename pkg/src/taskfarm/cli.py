"""Command-line interface.

One executable, subcommand per role:

    taskfarm serve       run a dispatcher
    taskfarm worker      run a worker executor
    taskfarm provision   start worker blocks through a provider
    taskfarm submit      submit tasks and (optionally) wait for them
    taskfarm status      query a running dispatcher
    taskfarm shutdown    stop a running dispatcher
    taskfarm resume      continue an interrupted run from its journal
    taskfarm trace       generate or inspect workload trace files
    taskfarm model       analytic + simulated performance predictions
    taskfarm bench       live benchmarks against a temporary cluster

Machine-readable results go to stdout as JSON; logs and progress go to
stderr.  ``submit`` exits 1 if any task ended failed.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
import time
from pathlib import Path
from typing import Optional

from taskfarm import config as config_mod
from taskfarm.config import ConfigError, load_config, parse_address
from taskfarm.dispatch import (
    DispatcherCore, DispatcherServer, build_resumed_core,
)
from taskfarm.proto import DispatchMode, TaskSpec
from taskfarm.runlog import RunLogWriter, find_run_file, replay_state
from taskfarm.worker import ExecutorConfig, run_worker

log = logging.getLogger("taskfarm.cli")


def _emit(obj: dict) -> None:
    json.dump(obj, sys.stdout)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load(args: argparse.Namespace) -> config_mod.RunConfig:
    return load_config(getattr(args, "config", None))


# ---- serve -------------------------------------------------------------


def _serve_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--address", help="host:port to listen on "
                        "(port 0 picks a free port)")
    parser.add_argument("--bundle-size", type=int)
    parser.add_argument("--max-retries", type=int)
    parser.add_argument("--suspend-threshold", type=int)
    parser.add_argument("--heartbeat-interval", type=float)
    parser.add_argument("--log-dir", help="directory for run journals")
    parser.add_argument("--link-mbps", type=float,
                        help="emulate a link of this capacity (Mbit/s)")
    parser.add_argument("--shutdown-on-drain", action="store_true",
                        help="exit once every submitted task has finished")


def _apply_serve_overrides(cfg, args) -> None:
    d = cfg.dispatcher
    for name in ("address", "bundle_size", "max_retries",
                 "suspend_threshold", "heartbeat_interval", "log_dir",
                 "link_mbps"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(d, name, value)


async def _serve(core: DispatcherCore, host: str, port: int,
                 cfg, shutdown_on_drain: bool) -> int:
    server = DispatcherServer(
        core, host, port,
        heartbeat_interval=cfg.dispatcher.heartbeat_interval,
        link_mbps=cfg.dispatcher.link_mbps,
        shutdown_on_drain=shutdown_on_drain)
    await server.start()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, server.request_stop)
        except NotImplementedError:  # pragma: no cover
            pass
    _emit({"event": "ready", "host": host, "port": server.port,
           "run_id": core.run_id})
    await server.serve_forever()
    _emit({"event": "stopped", "run_id": core.run_id,
           **core.stats()})
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = _load(args)
    _apply_serve_overrides(cfg, args)
    host, port = cfg.dispatcher.host_port
    log_dir = Path(cfg.dispatcher.log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    core = DispatcherCore(bundle_size=cfg.dispatcher.bundle_size,
                          max_retries=cfg.dispatcher.max_retries,
                          suspend_threshold=cfg.dispatcher.suspend_threshold)
    journal_path = log_dir / f"{core.run_id}.jsonl"
    core.journal = RunLogWriter(journal_path, core.run_id, core.epoch_ns)
    _say(f"journal: {journal_path}")
    return asyncio.run(_serve(core, host, port, cfg,
                              args.shutdown_on_drain))


def cmd_resume(args: argparse.Namespace) -> int:
    cfg = _load(args)
    _apply_serve_overrides(cfg, args)
    journal = Path(args.journal) if args.journal else None
    if journal is None:
        if not args.run_id:
            _say("resume needs --journal FILE or --run-id ID")
            return 2
        try:
            journal = find_run_file(Path(cfg.dispatcher.log_dir),
                                    args.run_id)
        except FileNotFoundError as exc:
            _say(str(exc))
            return 2
    core = build_resumed_core(
        journal, bundle_size=cfg.dispatcher.bundle_size,
        max_retries=cfg.dispatcher.max_retries,
        suspend_threshold=cfg.dispatcher.suspend_threshold)
    host, port = cfg.dispatcher.host_port
    _say(f"resuming run {core.run_id}: {core.n_done} done, "
         f"{core.n_failed} failed, {core.n_queued} to re-run")
    drain = not args.stay_up
    return asyncio.run(_serve(core, host, port, cfg, drain))


# ---- worker ------------------------------------------------------------


def cmd_worker(args: argparse.Namespace) -> int:
    cfg = _load(args)
    w = cfg.worker
    address = args.address or os.environ.get("TASKFARM_ADDRESS") \
        or cfg.dispatcher.address
    host, port = parse_address(address)
    mode_name = args.mode or w.mode or cfg.dispatcher.mode
    exec_cfg = ExecutorConfig(
        host=host, port=port,
        cores=args.cores if args.cores is not None else w.cores,
        mode=DispatchMode.PULL if mode_name == "pull" else DispatchMode.PUSH,
        scratch_dir=Path(args.scratch_dir or w.scratch_dir),
        cache_capacity=args.cache_capacity if args.cache_capacity is not None
        else w.cache_capacity_bytes,
        prefetch_depth=args.prefetch_depth if args.prefetch_depth is not None
        else w.prefetch_depth,
        task_timeout=args.task_timeout if args.task_timeout is not None
        else w.task_timeout_s,
        fail_fast_patterns=tuple(w.fail_fast_patterns),
        tag=args.tag or "")
    run_worker(exec_cfg)
    return 0


# ---- provision ---------------------------------------------------------


def cmd_provision(args: argparse.Namespace) -> int:
    from taskfarm import provision as prov

    cfg = _load(args)
    p = cfg.provider
    name = args.provider or p.name
    block_size = args.block_size or p.block_size
    address = args.address or cfg.dispatcher.address
    host, port = parse_address(address)
    if name == "script":
        start = args.start_script or p.start_script
        stop = args.stop_script or p.stop_script
        if not (start and stop):
            _say("script provider needs --start-script and --stop-script")
            return 2
        provider = prov.ScriptProvider(start, stop)
    else:
        provider = prov.LocalProvider(
            scratch_root=Path(cfg.worker.scratch_dir),
            mode=args.mode or cfg.dispatcher.mode)

    async def go() -> int:
        alloc = await prov.provision(provider, args.cores, block_size,
                                     host, port, tag=args.tag,
                                     timeout=args.timeout)
        _emit({"event": "provisioned", **alloc.to_dict()})
        if args.duration > 0:
            await prov.enforce_duration(provider, alloc, args.duration)
            _emit({"event": "deprovisioned", "tag": alloc.tag})
        return 0

    return asyncio.run(go())


# ---- submit ------------------------------------------------------------


def _specs_from_args(args: argparse.Namespace) -> list[TaskSpec]:
    payload = b"\0" * args.payload_bytes if args.payload_bytes else b""
    seq = int(time.time_ns() & 0xFFFF)
    if args.trace:
        from taskfarm.bench.traces import load_trace

        tr = load_trace(args.trace)
        durs = tr.scaled
        if args.count:
            durs = durs[:args.count]
        return [TaskSpec(_mk_id(seq, i), f"@sleep {d!r}", payload)
                for i, d in enumerate(durs.tolist())]
    if args.spec_file:
        specs = []
        with open(args.spec_file) as f:
            for i, line in enumerate(f):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                doc = json.loads(line)
                import base64 as _b64

                specs.append(TaskSpec(
                    bytes.fromhex(doc["id"]) if "id" in doc
                    else _mk_id(seq, i),
                    doc["command"],
                    _b64.b64decode(doc.get("payload_b64", ""))))
        return specs
    if args.command:
        command = f"{args.command} {args.args}".strip() if args.args \
            else args.command
        return [TaskSpec(_mk_id(seq, i), command, payload)
                for i in range(args.count or 1)]
    raise SystemExit("submit needs --command, --trace, or --spec-file")


def _mk_id(stream: int, i: int) -> bytes:
    import struct as _struct

    return _struct.pack(">QQ", stream, i)


def cmd_submit(args: argparse.Namespace) -> int:
    from taskfarm.client import DispatcherClient

    cfg = _load(args)
    address = args.address or cfg.dispatcher.address
    host, port = parse_address(address)
    specs = _specs_from_args(args)

    async def go() -> int:
        async with DispatcherClient(host, port) as client:
            t0 = time.perf_counter()
            statuses = await client.submit(specs)
            if not args.wait:
                _emit({"event": "submitted", "n_tasks": len(specs),
                       "statuses": _tally(statuses)})
                return 0
            status = await client.wait_drained()
            elapsed = time.perf_counter() - t0
            failed = status.get("failed", 0)
            _emit({"event": "drained", "n_tasks": len(specs),
                   "elapsed_s": round(elapsed, 6),
                   "throughput": round(len(specs) / elapsed, 3)
                   if elapsed > 0 else None,
                   "done": status.get("done"), "failed": failed,
                   "makespan_s": status.get("makespan_s")})
            return 1 if failed else 0

    return asyncio.run(go())


def _tally(statuses: dict) -> dict:
    out: dict[str, int] = {}
    for st in statuses.values():
        out[st.name.lower()] = out.get(st.name.lower(), 0) + 1
    return out


def cmd_status(args: argparse.Namespace) -> int:
    from taskfarm.client import fetch_status

    cfg = _load(args)
    address = args.address or cfg.dispatcher.address
    host, port = parse_address(address)
    _emit(asyncio.run(fetch_status(host, port)))
    return 0


def cmd_shutdown(args: argparse.Namespace) -> int:
    from taskfarm.client import DispatcherClient

    cfg = _load(args)
    address = args.address or cfg.dispatcher.address
    host, port = parse_address(address)

    async def go() -> None:
        async with DispatcherClient(host, port) as client:
            await client.shutdown(drain=not args.now)

    asyncio.run(go())
    _emit({"event": "shutdown-requested", "drain": not args.now})
    return 0


# ---- trace / model / bench ----------------------------------------------


def cmd_trace(args: argparse.Namespace) -> int:
    from taskfarm.bench import traces as tr

    if args.trace_cmd == "gen":
        trace = tr.generate_trace(args.workload, n=args.n, seed=args.seed,
                                  order=args.order,
                                  time_scale=args.time_scale,
                                  processors=args.processors)
        tr.save_trace(trace, args.out)
        _emit({"event": "trace-written", "path": args.out, **trace.stats()})
        return 0
    trace = tr.load_trace(args.file)
    _emit({"path": args.file, "name": trace.name, **trace.stats(),
           "meta": trace.meta})
    return 0


def cmd_model(args: argparse.Namespace) -> int:
    from taskfarm.perfmodel import engine as eng

    if args.model_cmd == "efficiency":
        eff = eng.closed_form_efficiency(args.rate, args.task_s,
                                         args.processors)
        out = {"model": "closed-form", "task_s": args.task_s,
               "processors": args.processors, "rate": args.rate,
               "efficiency": eff}
        if args.waves:
            out["wave_efficiency"] = eng.wave_efficiency(
                args.waves, args.task_s, args.processors, args.rate)
        _emit(out)
        return 0
    if args.model_cmd == "min-task":
        out = {"model": "min-task-length", "rate": args.rate}
        per_msg = 1.0 / args.rate
        for eff in args.efficiency:
            out[f"eff_{eff}"] = eng.min_task_length_for_efficiency(
                eff, per_msg)
        _emit(out)
        return 0
    if args.model_cmd == "wire":
        from taskfarm.proto import estimate_wire_bytes_per_task

        rows = []
        for s in args.payload_bytes:
            nbytes, pkts = estimate_wire_bytes_per_task(s)
            rows.append({"payload_bytes": s, "wire_bytes": round(nbytes, 1),
                         "packets": round(pkts, 2)})
        _emit({"model": "wire-cost", "rows": rows})
        return 0
    if args.model_cmd == "des":
        if args.trace:
            from taskfarm.bench.traces import load_trace, replay_sim

            trace = load_trace(args.trace)
            res = replay_sim(trace, args.processors, args.rate,
                             args.bundle_size)
        else:
            spec = (eng.lognormal(args.mean, args.sd)
                    if args.sd else eng.constant(args.task_s))
            res = eng.des_run(args.processors, args.rate, spec,
                              n_tasks=args.n,
                              bundle_size=args.bundle_size, seed=args.seed)
        _emit({"model": "des", **res.to_dict()})
        return 0
    raise SystemExit(f"unknown model command {args.model_cmd!r}")


def cmd_bench(args: argparse.Namespace) -> int:
    from taskfarm.bench import harness
    from taskfarm.bench.reports import write_report

    async def go() -> dict:
        if args.bench_cmd == "throughput":
            return await harness.throughput_bench(
                n_tasks=args.n, workers=args.workers, cores=args.cores,
                mode=args.mode, bundle_size=args.bundle_size)
        if args.bench_cmd == "bundling":
            return await harness.bundling_bench(
                n_tasks=args.n, bundle_sizes=tuple(args.bundle_sizes),
                workers=args.workers, link_mbps=args.link_mbps)
        if args.bench_cmd == "payload":
            return await harness.payload_bench(
                sizes=tuple(args.sizes), workers=args.workers,
                link_mbps=args.link_mbps, bundle_size=args.bundle_size)
        if args.bench_cmd == "efficiency":
            return await harness.efficiency_bench(
                task_lengths=tuple(args.lengths), workers=args.workers,
                waves=args.waves)
        if args.bench_cmd == "replay":
            from taskfarm.bench.traces import load_trace

            trace = load_trace(args.trace)
            if args.time_scale is not None:
                trace.time_scale = args.time_scale
            return await harness.replay_bench(trace, args.workers,
                                              args.cores, args.bundle_size)
        if args.bench_cmd == "fs":
            from taskfarm.bench.fsbench import staging_bench

            return await staging_bench(n_tasks=args.n,
                                       input_bytes=args.input_bytes)
        raise SystemExit(f"unknown bench {args.bench_cmd!r}")

    report = asyncio.run(go())
    _emit(report)
    if args.out:
        write_report(report, Path(args.out))
        _say(f"report written to {args.out}")
    return 0


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskfarm",
        description="High-throughput many-task execution fabric.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v info, -vv debug (stderr)")
    parser.add_argument("--config", help="YAML config file")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("serve", help="run a dispatcher")
    _serve_common(p)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("resume", help="continue a run from its journal")
    _serve_common(p)
    p.add_argument("--journal", help="journal file of the interrupted run")
    p.add_argument("--run-id", help="look the journal up by run id")
    p.add_argument("--stay-up", action="store_true",
                   help="keep serving after the backlog drains")
    p.set_defaults(fn=cmd_resume)

    p = sub.add_parser("worker", help="run a worker executor")
    p.add_argument("--address", help="dispatcher host:port")
    p.add_argument("--cores", type=int)
    p.add_argument("--mode", choices=("push", "pull"))
    p.add_argument("--scratch-dir")
    p.add_argument("--cache-capacity", type=int,
                   help="scratch cache capacity in bytes")
    p.add_argument("--prefetch-depth", type=int)
    p.add_argument("--task-timeout", type=float)
    p.add_argument("--tag", default="")
    p.set_defaults(fn=cmd_worker)

    p = sub.add_parser("provision", help="start worker blocks")
    p.add_argument("--address")
    p.add_argument("--cores", type=int, required=True,
                   help="total cores wanted")
    p.add_argument("--block-size", type=int)
    p.add_argument("--provider", choices=("local", "script"))
    p.add_argument("--start-script")
    p.add_argument("--stop-script")
    p.add_argument("--mode", choices=("push", "pull"))
    p.add_argument("--tag", default="alloc")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--duration", type=float, default=0.0,
                   help="stop the blocks after this many seconds")
    p.set_defaults(fn=cmd_provision)

    p = sub.add_parser("submit", help="submit tasks")
    p.add_argument("--address")
    p.add_argument("--command", help="task command ('@sleep 1', '/bin/...')")
    p.add_argument("--args", default="")
    p.add_argument("--count", type=int, help="number of copies")
    p.add_argument("--payload-bytes", type=int, default=0)
    p.add_argument("--trace", help="replay a trace file as @sleep tasks")
    p.add_argument("--spec-file", help="JSON-lines task spec file")
    p.add_argument("--wait", action=argparse.BooleanOptionalAction,
                   default=True, help="wait until the batch drains")
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("status", help="query a dispatcher")
    p.add_argument("--address")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("shutdown", help="stop a dispatcher")
    p.add_argument("--address")
    p.add_argument("--now", action="store_true",
                   help="stop without draining")
    p.set_defaults(fn=cmd_shutdown)

    p = sub.add_parser("trace", help="workload trace files")
    tsub = p.add_subparsers(dest="trace_cmd", required=True)
    g = tsub.add_parser("gen", help="generate a trace file")
    g.add_argument("--workload", required=True,
                   choices=("dock", "mars", "uniform", "constant"))
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--order", default="default",
                   choices=("default", "feathered", "shuffled"))
    g.add_argument("--time-scale", type=float, default=1.0)
    g.add_argument("--processors", type=int, default=5760,
                   help="deadline target used by feathered ordering")
    g.add_argument("--out", required=True)
    s = tsub.add_parser("stats", help="summarize a trace file")
    s.add_argument("file")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("model", help="performance model")
    msub = p.add_subparsers(dest="model_cmd", required=True)
    m = msub.add_parser("efficiency", help="closed-form efficiency")
    m.add_argument("--task-s", type=float, required=True)
    m.add_argument("--processors", type=int, required=True)
    m.add_argument("--rate", type=float, required=True)
    m.add_argument("--waves", type=int)
    m = msub.add_parser("min-task", help="shortest efficient task length")
    m.add_argument("--rate", type=float, required=True)
    m.add_argument("--efficiency", type=float, nargs="+",
                   default=[0.9, 0.95])
    m = msub.add_parser("wire", help="wire cost per task")
    m.add_argument("--payload-bytes", type=int, nargs="+",
                   default=[10, 100, 1024, 10240])
    m = msub.add_parser("des", help="discrete-event simulation")
    m.add_argument("--task-s", type=float, default=1.0)
    m.add_argument("--mean", type=float)
    m.add_argument("--sd", type=float)
    m.add_argument("--n", type=int, default=10000)
    m.add_argument("--processors", type=int, required=True)
    m.add_argument("--rate", type=float, required=True)
    m.add_argument("--bundle-size", type=int, default=1)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--trace", help="simulate a trace file instead")
    p.set_defaults(fn=cmd_model)

    p = sub.add_parser("bench", help="live benchmarks")
    bsub = p.add_subparsers(dest="bench_cmd", required=True)
    b = bsub.add_parser("throughput")
    b.add_argument("--n", type=int, default=100_000)
    b.add_argument("--workers", type=int, default=16)
    b.add_argument("--cores", type=int, default=1)
    b.add_argument("--mode", choices=("push", "pull"), default="push")
    b.add_argument("--bundle-size", type=int, default=1)
    b.add_argument("--out")
    b = bsub.add_parser("bundling")
    b.add_argument("--n", type=int, default=1500)
    b.add_argument("--bundle-sizes", type=int, nargs="+", default=[1, 10])
    b.add_argument("--workers", type=int, default=4)
    b.add_argument("--link-mbps", type=float, default=1.0)
    b.add_argument("--out")
    b = bsub.add_parser("payload")
    b.add_argument("--sizes", type=int, nargs="+",
                   default=[10, 100, 1024, 10240])
    b.add_argument("--workers", type=int, default=4)
    b.add_argument("--link-mbps", type=float, default=4.0)
    b.add_argument("--bundle-size", type=int, default=10)
    b.add_argument("--out")
    b = bsub.add_parser("efficiency")
    b.add_argument("--lengths", type=float, nargs="+",
                   default=[0.1, 0.5, 1.0, 2.0, 4.0])
    b.add_argument("--workers", type=int, default=64)
    b.add_argument("--waves", type=int, default=4)
    b.add_argument("--out")
    b = bsub.add_parser("replay")
    b.add_argument("--trace", required=True)
    b.add_argument("--workers", type=int, required=True)
    b.add_argument("--cores", type=int, default=1)
    b.add_argument("--bundle-size", type=int, default=1)
    b.add_argument("--time-scale", type=float)
    b.add_argument("--out")
    b = bsub.add_parser("fs")
    b.add_argument("--n", type=int, default=200)
    b.add_argument("--input-bytes", type=int, default=1 << 20)
    b.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO,
             logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s "
                               "%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
