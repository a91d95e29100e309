"""Workload traces: synthetic generators, file format, simulator replay.

Built-in workload families
--------------------------
``dock``      Per-frame molecular-docking style runtimes: lognormal with mean
              660 s, standard deviation 478.8 s, clipped to [5.8 s, 4178 s].
              Default n = 92000.
``mars``      Image-reprojection style runtimes: near-constant normal
              (mean 65.376 s, sd 0.312 s, floored at 1 ms). Default n = 49000.
``uniform``   Uniform on [lo, hi).
``constant``  Every task the same length.

Ordering
--------
Submission order matters for heavy-tailed workloads: if the longest tasks can
start late, the tail of the run drains on a handful of processors and batch
efficiency collapses no matter how fast dispatch is.  ``order="feathered"``
(the dock default) places tasks longest-first into a uniformly random slot
among the positions early enough that the task still finishes by the ideal
makespan plus a small slack — the way a production campaign staged by a
deadline-aware splitter would submit them.  ``order="shuffled"`` keeps the
i.i.d. random order for studying exactly that ramp-down effect.

File format
-----------
A trace file is JSON-lines: one header object (name, n, time_scale,
generator metadata), then one duration (seconds, plain decimal) per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from taskfarm.perfmodel import engine as _engine

DOCK_MEAN = 660.0
DOCK_SD = 478.8
DOCK_CLIP = (5.8, 4178.0)
DOCK_N = 92000

MARS_MEAN = 65.376
MARS_SD = 0.312
MARS_N = 49000


@dataclass
class WorkloadTrace:
    """A fixed sequence of task durations, in submission order."""

    name: str
    durations: np.ndarray
    time_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.durations = np.asarray(self.durations, dtype=np.float64)
        if self.durations.ndim != 1 or len(self.durations) == 0:
            raise ValueError("durations must be a non-empty 1-d array")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")

    def __len__(self) -> int:
        return len(self.durations)

    @property
    def scaled(self) -> np.ndarray:
        """Durations with the replay time scale applied."""
        if self.time_scale == 1.0:
            return self.durations
        return self.durations * self.time_scale

    def stats(self) -> dict:
        d = self.durations
        return {
            "n": int(len(d)),
            "mean": float(d.mean()),
            "sd": float(d.std()),
            "min": float(d.min()),
            "max": float(d.max()),
            "total": float(d.sum()),
            "time_scale": self.time_scale,
        }

    def to_duration_spec(self) -> _engine.DurationSpec:
        return _engine.trace(self.scaled)


class _OrderStatTree:
    """Order-statistics tree over slot indices 0..n-1, all initially free.

    Supports counting free slots below a bound and removing the k-th free
    slot, both in O(log n).  Used to place tasks into random allowed slots.
    """

    def __init__(self, n: int) -> None:
        size = 1
        while size < n:
            size *= 2
        self.size = size
        tree = [0] * (2 * size)
        tree[size:size + n] = [1] * n
        for i in range(size - 1, 0, -1):
            tree[i] = tree[2 * i] + tree[2 * i + 1]
        self.tree = tree

    def count_below(self, hi: int) -> int:
        """Number of free slots with index < hi."""
        tree = self.tree
        res = 0
        stack = [(1, 0, self.size)]
        while stack:
            node, lo, span = stack.pop()
            if lo + span <= hi:
                res += tree[node]
                continue
            if lo >= hi or tree[node] == 0:
                continue
            half = span // 2
            stack.append((2 * node, lo, half))
            stack.append((2 * node + 1, lo + half, half))
        return res

    def take(self, k: int) -> int:
        """Remove and return the index of the k-th (0-based) free slot."""
        tree = self.tree
        node = 1
        while node < self.size:
            left = 2 * node
            if tree[left] > k:
                node = left
            else:
                k -= tree[left]
                node = left + 1
        pos = node - self.size
        while node:
            tree[node] -= 1
            node //= 2
        return pos


def feathered_order(durations: np.ndarray, processors: int,
                    rng: np.random.Generator,
                    slack_frac: float = 0.02) -> np.ndarray:
    """Reorder durations so every task can finish by T_ideal + slack.

    T_ideal = sum(d)/P is the perfectly balanced makespan.  A task placed at
    position p out of n starts at roughly T_ideal * p/n, so duration d is
    only allowed at positions with T_ideal * p/n <= T_ideal + slack - d.
    Tasks are placed longest-first into a uniformly random allowed free slot;
    if rounding leaves none, the earliest free slot is used.
    """
    durations = np.asarray(durations, dtype=np.float64)
    n = len(durations)
    total = float(durations.sum())
    t_ideal = total / processors
    slack = slack_frac * t_ideal
    tree = _OrderStatTree(n)
    out = np.empty(n, dtype=np.float64)
    for idx in np.argsort(-durations):
        d = durations[idx]
        frac = (t_ideal + slack - d) / t_ideal
        hi_pos = min(n, max(1, int(frac * n)))
        m = tree.count_below(hi_pos)
        k = int(rng.integers(0, m)) if m > 0 else 0
        out[tree.take(k)] = d
    return out


def generate_trace(workload: str,
                   n: Optional[int] = None,
                   seed: int = 0,
                   order: str = "default",
                   time_scale: float = 1.0,
                   processors: int = 5760,
                   **params) -> WorkloadTrace:
    """Generate one of the built-in workloads.

    order: "default" (feathered for dock, sampled order otherwise),
    "feathered", or "shuffled" (keep the i.i.d. sample order).
    ``processors`` only matters for feathering (it sets the deadline).
    """
    rng = np.random.default_rng(seed)
    meta: dict = {"workload": workload, "seed": seed, "order": order}

    if workload == "dock":
        n = DOCK_N if n is None else n
        sigma2 = math.log(1.0 + (DOCK_SD / DOCK_MEAN) ** 2)
        sigma = math.sqrt(sigma2)
        mu = math.log(DOCK_MEAN) - sigma2 / 2.0
        durs = np.clip(rng.lognormal(mu, sigma, n), *DOCK_CLIP)
        meta.update(mean=DOCK_MEAN, sd=DOCK_SD, clip=list(DOCK_CLIP),
                    mu=mu, sigma=sigma)
        if order in ("default", "feathered"):
            durs = feathered_order(durs, processors, rng)
            meta["order"] = "feathered"
            meta["processors"] = processors
        elif order != "shuffled":
            raise ValueError(f"unknown order {order!r}")
    elif workload == "mars":
        n = MARS_N if n is None else n
        durs = np.maximum(rng.normal(MARS_MEAN, MARS_SD, n), 0.001)
        meta.update(mean=MARS_MEAN, sd=MARS_SD)
        if order == "feathered":
            durs = feathered_order(durs, processors, rng)
            meta["processors"] = processors
        else:
            meta["order"] = "shuffled"
    elif workload == "uniform":
        if n is None:
            raise ValueError("uniform workload needs n")
        lo = float(params.pop("lo", 0.0))
        hi = float(params.pop("hi", 1.0))
        durs = rng.uniform(lo, hi, n)
        meta.update(lo=lo, hi=hi)
    elif workload == "constant":
        if n is None:
            raise ValueError("constant workload needs n")
        value = float(params.pop("value", 1.0))
        durs = np.full(n, value)
        meta.update(value=value)
    else:
        raise ValueError(f"unknown workload {workload!r}; "
                         "expected dock, mars, uniform, or constant")
    if params:
        raise ValueError(f"unexpected parameters: {sorted(params)}")
    return WorkloadTrace(name=workload, durations=durs,
                         time_scale=time_scale, meta=meta)


def save_trace(trace: WorkloadTrace, path: str | Path) -> None:
    path = Path(path)
    header = {
        "kind": "taskfarm-trace",
        "version": 1,
        "name": trace.name,
        "n": len(trace),
        "time_scale": trace.time_scale,
        "meta": trace.meta,
    }
    with path.open("w") as f:
        f.write(json.dumps(header) + "\n")
        f.writelines(f"{d!r}\n" for d in trace.durations.tolist())


def load_trace(path: str | Path) -> WorkloadTrace:
    path = Path(path)
    with path.open() as f:
        header = json.loads(f.readline())
        if header.get("kind") != "taskfarm-trace":
            raise ValueError(f"{path}: not a trace file")
        durs = np.loadtxt(f, dtype=np.float64, ndmin=1)
    if len(durs) != header["n"]:
        raise ValueError(f"{path}: header says {header['n']} durations, "
                         f"found {len(durs)}")
    return WorkloadTrace(name=header["name"], durations=durs,
                         time_scale=header.get("time_scale", 1.0),
                         meta=header.get("meta", {}))


def replay_sim(trace: WorkloadTrace, processors: int, rate: float,
               bundle_size: int = 1) -> _engine.SimResult:
    """Replay a trace through the discrete-event model."""
    return _engine.des_run(processors, rate, trace.to_duration_spec(),
                           n_tasks=len(trace), bundle_size=bundle_size)
