"""Input-staging benchmark: shared-directory reads vs worker scratch cache.

Both variants run the same tasks — read one shared input file end to end —
on one multi-core worker.  The *direct* variant marks the input
non-cacheable, so every invocation reads the source file again (page cache
dropped after each read, plus an explicit per-read service delay standing in
for a contended shared-filesystem server).  The *scratch* variant marks it
cacheable: the worker stages it once into local scratch and serves every
later invocation from there.

The interesting outputs are the invocation rates and the number of source
reads the cache actually performed.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

from taskfarm.proto import InputFile, TaskSpec

from taskfarm.bench.harness import LiveCluster, task_id_for

DEFAULT_SERVICE_MS = 20.0


def _source_specs(n: int, input_path: Path, *, cacheable: bool,
                  service_ms: float, stream: int) -> list[TaskSpec]:
    command = ("@source data" if cacheable
               else f"@source data {service_ms!r}")
    inp = (InputFile("data", str(input_path), cacheable),)
    return [TaskSpec(task_id_for(i, stream), command, b"", inp, ())
            for i in range(n)]


def _load_worker_stats(scratch_root: Path) -> Optional[dict]:
    """Read the stats file the worker drops in its scratch directory."""
    candidates = sorted(scratch_root.glob("**/worker-*.json"),
                        key=lambda p: p.stat().st_mtime)
    if not candidates:
        return None
    return json.loads(candidates[-1].read_text())


async def staging_bench(n_tasks: int = 200, input_bytes: int = 1 << 20,
                        cores: int = 4,
                        service_ms: float = DEFAULT_SERVICE_MS,
                        shared_dir: Optional[Path] = None,
                        scratch_root: Optional[Path] = None) -> dict:
    """Measure invocation rate for shared-dir vs scratch-cache staging."""
    shared_dir = Path(shared_dir or "/tmp/taskfarm-shared")
    shared_dir.mkdir(parents=True, exist_ok=True)
    input_path = shared_dir / "shared-input.bin"
    input_path.write_bytes(os.urandom(input_bytes))

    rows = []
    stats = {}
    for label, cacheable in (("direct", False), ("scratch", True)):
        root = Path(scratch_root or "/tmp/taskfarm-bench") / f"fs-{label}"
        async with LiveCluster(1, cores, scratch_root=root) as cluster:
            specs = _source_specs(n_tasks, input_path, cacheable=cacheable,
                                  service_ms=service_ms, stream=1)
            batch = await cluster.run_batch(specs)
        row = batch.to_dict()
        row["variant"] = label
        rows.append(row)
        got = _load_worker_stats(root)
        if got is not None:
            stats[label] = got

    try:
        input_path.unlink()
    except OSError:
        pass
    direct, scratch = rows
    return {
        "kind": "fs-staging",
        "n_tasks": n_tasks,
        "input_bytes": input_bytes,
        "cores": cores,
        "service_ms": service_ms,
        "rows": rows,
        "rate_direct": direct["throughput"],
        "rate_scratch": scratch["throughput"],
        "speedup": (scratch["throughput"] / direct["throughput"]
                    if direct["throughput"] else None),
        "worker_stats": stats,
    }
