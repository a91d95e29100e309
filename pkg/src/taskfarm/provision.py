"""Resource provisioning in block granularity.

Schedulers hand out whole blocks (a node, a partition slice), so a request
for N cores is rounded up to ceil(N / block_size) blocks. The two built-in
providers cover the common cases:

``local``   one worker process per block on this machine, block_size cores
            each; useful for tests, benchmarks, and single-node farms.
``script``  delegates to a pair of site-specific executables (submit a block,
            cancel a block) so batch systems can be driven without teaching
            this module their CLIs. The start script receives the dispatcher
            address and block geometry in TASKFARM_* environment variables
            and prints one opaque handle per line; handles come back to the
            stop script in TASKFARM_HANDLES.

Allocations can carry a wall-clock duration after which they are reclaimed.
"""

from __future__ import annotations

import asyncio
import math
import os
import shlex
import subprocess
import sys
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .client import DispatcherClient


def blocks_for(cores_requested: int, block_size: int) -> int:
    if cores_requested < 1 or block_size < 1:
        raise ValueError("cores_requested and block_size must be >= 1")
    return math.ceil(cores_requested / block_size)


def utilization_bound(concurrent_tasks: int, block_cores: int) -> float:
    """Best-case utilization of one block given how many of its cores can
    actually be kept busy at once (1 task on a 256-core block: 1/256)."""
    if block_cores < 1:
        raise ValueError("block_cores must be >= 1")
    if concurrent_tasks < 0:
        raise ValueError("concurrent_tasks must be >= 0")
    return min(1.0, concurrent_tasks / block_cores)


def amortized_boot_overhead(boot_s: float, n_tasks: int, task_s: float) -> float:
    """Fraction of an allocation's useful life spent booting it."""
    if boot_s < 0 or n_tasks < 0 or task_s < 0:
        raise ValueError("arguments must be non-negative")
    denom = boot_s + n_tasks * task_s
    return 0.0 if denom == 0 else boot_s / denom


@dataclass
class Allocation:
    alloc_id: str
    provider: str
    block_size: int
    blocks: int
    tag: str
    requested_cores: int
    started_at: float = field(default_factory=time.time)
    duration_s: Optional[float] = None
    boot_s: Optional[float] = None       # measured time to full registration
    handles: list = field(default_factory=list)

    @property
    def granted_cores(self) -> int:
        return self.blocks * self.block_size

    @property
    def expired(self) -> bool:
        return (self.duration_s is not None
                and time.time() - self.started_at > self.duration_s)

    def to_dict(self) -> dict:
        return {
            "alloc_id": self.alloc_id, "provider": self.provider,
            "block_size": self.block_size, "blocks": self.blocks,
            "tag": self.tag, "requested_cores": self.requested_cores,
            "granted_cores": self.granted_cores,
            "duration_s": self.duration_s, "boot_s": self.boot_s,
        }


class LocalProvider:
    """Spawns one worker process per block on this machine."""

    name = "local"

    def __init__(self, scratch_root: Path = Path("/tmp/taskfarm"),
                 mode: str = "push", extra_args: tuple[str, ...] = ()) -> None:
        self.scratch_root = Path(scratch_root)
        self.mode = mode
        self.extra_args = extra_args

    def start(self, blocks: int, block_size: int, host: str, port: int,
              tag: str) -> list[subprocess.Popen]:
        procs = []
        for i in range(blocks):
            scratch = self.scratch_root / f"{tag}-{i}"
            argv = [
                sys.executable, "-m", "taskfarm", "worker",
                "--address", f"{host}:{port}",
                "--cores", str(block_size),
                "--mode", self.mode,
                "--tag", tag,
                "--scratch-dir", str(scratch),
                *self.extra_args,
            ]
            procs.append(subprocess.Popen(
                argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL))
        return procs

    def stop(self, handles: list, grace_s: float = 5.0) -> None:
        for proc in handles:
            if proc.poll() is None:
                proc.terminate()
        deadline = time.monotonic() + grace_s
        for proc in handles:
            remaining = max(0.05, deadline - time.monotonic())
            try:
                proc.wait(timeout=remaining)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()


class ScriptProvider:
    """Drives site-specific start/stop executables."""

    name = "script"

    def __init__(self, start_script: str, stop_script: str) -> None:
        self.start_script = start_script
        self.stop_script = stop_script

    def start(self, blocks: int, block_size: int, host: str, port: int,
              tag: str) -> list[str]:
        env = {
            **os.environ,
            "TASKFARM_BLOCKS": str(blocks),
            "TASKFARM_BLOCK_SIZE": str(block_size),
            "TASKFARM_ADDRESS": f"{host}:{port}",
            "TASKFARM_TAG": tag,
        }
        out = subprocess.run(
            shlex.split(self.start_script), env=env, check=True,
            capture_output=True, text=True, timeout=300)
        return [line.strip() for line in out.stdout.splitlines()
                if line.strip()]

    def stop(self, handles: list, grace_s: float = 5.0) -> None:
        env = {**os.environ, "TASKFARM_HANDLES": "\n".join(handles)}
        subprocess.run(shlex.split(self.stop_script), env=env, check=True,
                       capture_output=True, timeout=300)


async def provision(provider, cores_requested: int, block_size: int,
                    host: str, port: int, *, tag: Optional[str] = None,
                    duration_s: Optional[float] = None,
                    wait_registered: bool = True,
                    timeout: float = 60.0) -> Allocation:
    """Start enough blocks for cores_requested cores and (optionally) wait
    until every block's worker has registered, measuring boot cost."""
    blocks = blocks_for(cores_requested, block_size)
    tag = tag or f"alloc-{uuid.uuid4().hex[:8]}"
    t0 = time.monotonic()
    handles = provider.start(blocks, block_size, host, port, tag)
    alloc = Allocation(
        alloc_id=uuid.uuid4().hex[:12], provider=provider.name,
        block_size=block_size, blocks=blocks, tag=tag,
        requested_cores=cores_requested, duration_s=duration_s,
        handles=handles)
    if wait_registered:
        deadline = time.monotonic() + timeout
        async with DispatcherClient(host, port) as client:
            while True:
                st = await client.status()
                mine = [w for w in st["workers"]
                        if w["tag"] == tag and not w["suspended"]]
                if len(mine) >= blocks:
                    break
                if time.monotonic() > deadline:
                    provider.stop(handles)
                    raise TimeoutError(
                        f"{len(mine)}/{blocks} blocks registered "
                        f"after {timeout}s")
                await asyncio.sleep(0.05)
        alloc.boot_s = time.monotonic() - t0
    return alloc


def deprovision(provider, alloc: Allocation, grace_s: float = 5.0) -> None:
    provider.stop(alloc.handles, grace_s)
    alloc.handles = []


async def enforce_duration(provider, alloc: Allocation,
                           poll_s: float = 1.0) -> None:
    """Background watchdog: reclaim the allocation when its time is up."""
    if alloc.duration_s is None:
        return
    while not alloc.expired:
        await asyncio.sleep(poll_s)
    deprovision(provider, alloc)
