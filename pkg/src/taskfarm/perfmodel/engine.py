"""Performance model: closed-form throughput/efficiency laws plus a
discrete-event simulator for the regimes the formulas cannot capture
(fill/drain edges, heterogeneous durations, bundling).

The simulator kernel is compiled (Cython) when available and falls back to a
pure-Python twin with identical semantics; set TASKFARM_PURE_KERNEL=1 to force
the fallback.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

if os.environ.get("TASKFARM_PURE_KERNEL"):
    from . import _kernel_py as _impl

    KERNEL = "python"
else:
    try:
        from . import _kernel as _impl  # type: ignore[no-redef]

        KERNEL = "compiled"
    except ImportError:
        from . import _kernel_py as _impl  # type: ignore[no-redef]

        KERNEL = "python"


# --- closed forms ------------------------------------------------------------


def closed_form_efficiency(rate: float, task_s: float, processors: int) -> float:
    """Steady-state efficiency of P processors fed at `rate` tasks/s.

    Each processor needs a new task every task_s seconds; the dispatcher can
    supply rate of them per second, so utilization saturates at rate*t/P:

        efficiency = min(1, rate * task_s / processors)
    """
    if processors <= 0:
        raise ValueError("processors must be positive")
    if rate <= 0 or task_s < 0:
        raise ValueError("rate must be positive and task_s non-negative")
    return min(1.0, rate * task_s / processors)


def min_task_length_for_efficiency(target_eff: float, overhead_s: float) -> float:
    """Shortest task that still reaches target efficiency given a fixed
    per-task overhead: eff = t / (t + o)  =>  t = o * eff / (1 - eff)."""
    if not 0.0 < target_eff < 1.0:
        raise ValueError("target efficiency must be in (0, 1)")
    if overhead_s < 0:
        raise ValueError("overhead must be non-negative")
    return overhead_s * target_eff / (1.0 - target_eff)


def wave_efficiency(waves: int, task_s: float, processors: int, rate: float) -> float:
    """Efficiency of a finite run of `waves` back-to-back task waves.

    The only loss is the staggered fill of P processors at 1/rate per task:
    makespan = waves*t + (P + waves - 1)/rate."""
    if waves < 1:
        raise ValueError("waves must be >= 1")
    total = waves * task_s + (processors + waves - 1) / rate
    return waves * task_s / total


def io_overhead_per_task(total_bytes: float, aggregate_bw_mbps: float,
                         processors: int, n_ops: int = 0,
                         per_op_latency: float = 0.0) -> float:
    """Seconds of I/O stall per task when `processors` tasks share an
    aggregate filesystem of aggregate_bw_mbps megabits/s: every concurrent
    client sees bw/P, plus a fixed metadata latency per operation."""
    if aggregate_bw_mbps <= 0 or processors <= 0:
        raise ValueError("bandwidth and processors must be positive")
    per_proc_bytes_s = aggregate_bw_mbps * 1e6 / 8.0 / processors
    return n_ops * per_op_latency + total_bytes / per_proc_bytes_s


def effective_task_time(compute_s: float, total_bytes: float = 0.0,
                        aggregate_bw_mbps: float = 775.0,
                        processors: int = 1, n_ops: int = 0,
                        per_op_latency: float = 0.0) -> float:
    """Task wall time once shared-filesystem stalls are folded in."""
    if total_bytes == 0.0 and n_ops == 0:
        return compute_s
    return compute_s + io_overhead_per_task(
        total_bytes, aggregate_bw_mbps, processors, n_ops, per_op_latency)


def lognormal_from_mean_sd(mean: float, sd: float) -> tuple[float, float]:
    """(mu, sigma) of the lognormal with the given arithmetic mean and sd."""
    if mean <= 0 or sd < 0:
        raise ValueError("mean must be positive, sd non-negative")
    sigma2 = math.log(1.0 + (sd / mean) ** 2)
    mu = math.log(mean) - sigma2 / 2.0
    return mu, math.sqrt(sigma2)


# --- duration specifications --------------------------------------------------


@dataclass(frozen=True, eq=False)
class DurationSpec:
    """How task durations are produced for a simulation.

    kinds:
      constant   every task lasts `mean`
      uniform    U(low, high)
      normal     N(mean, sd) clipped below at `low`
      lognormal  arithmetic mean/sd as given, clipped to [low, high] if set
      empirical  i.i.d. resampling from `values`
      trace      `values` used verbatim, in order
    """

    kind: str
    mean: float = 0.0
    sd: float = 0.0
    low: float = 0.0
    high: float = math.inf
    values: Optional[np.ndarray] = None

    def mean_value(self) -> float:
        if self.kind in ("empirical", "trace"):
            return float(np.mean(self.values))
        if self.kind == "uniform":
            return (self.low + self.high) / 2.0
        return self.mean

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.mean)
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, n)
        if self.kind == "normal":
            return np.maximum(rng.normal(self.mean, self.sd, n), self.low)
        if self.kind == "lognormal":
            mu, sigma = lognormal_from_mean_sd(self.mean, self.sd)
            out = rng.lognormal(mu, sigma, n)
            return np.clip(out, self.low, None if math.isinf(self.high) else self.high)
        if self.kind == "empirical":
            return self.values[rng.integers(0, len(self.values), n)]
        if self.kind == "trace":
            if n != len(self.values):
                raise ValueError("trace durations fix n_tasks to len(values)")
            return np.asarray(self.values, dtype=np.float64)
        raise ValueError(f"unknown duration kind {self.kind!r}")


def constant(t: float) -> DurationSpec:
    return DurationSpec("constant", mean=t)


def uniform(low: float, high: float) -> DurationSpec:
    return DurationSpec("uniform", low=low, high=high)


def normal(mean: float, sd: float, low: float = 0.0) -> DurationSpec:
    return DurationSpec("normal", mean=mean, sd=sd, low=low)


def lognormal(mean: float, sd: float, low: float = 0.0,
              high: float = math.inf) -> DurationSpec:
    return DurationSpec("lognormal", mean=mean, sd=sd, low=low, high=high)


def empirical(values) -> DurationSpec:
    return DurationSpec("empirical",
                        values=np.asarray(values, dtype=np.float64))


def trace(values) -> DurationSpec:
    return DurationSpec("trace", values=np.asarray(values, dtype=np.float64))


# --- simulation --------------------------------------------------------------


@dataclass
class SimResult:
    processors: int
    rate: float
    n_tasks: int
    bundle_size: int
    duration_kind: str
    makespan: float
    busy_time: float
    n_messages: int
    seed: int
    starts: Optional[np.ndarray] = field(default=None, repr=False)
    finishes: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def efficiency(self) -> float:
        if self.makespan == 0.0:
            return 0.0
        return self.busy_time / (self.processors * self.makespan)

    @property
    def throughput(self) -> float:
        if self.makespan == 0.0:
            return 0.0
        return self.n_tasks / self.makespan

    @property
    def dispatcher_utilization(self) -> float:
        if self.makespan == 0.0:
            return 0.0
        return self.n_messages / self.rate / self.makespan

    def to_dict(self) -> dict:
        return {
            "processors": self.processors,
            "rate": self.rate,
            "n_tasks": self.n_tasks,
            "bundle_size": self.bundle_size,
            "duration_kind": self.duration_kind,
            "makespan": self.makespan,
            "busy_time": self.busy_time,
            "efficiency": self.efficiency,
            "throughput": self.throughput,
            "n_messages": self.n_messages,
            "dispatcher_utilization": self.dispatcher_utilization,
            "kernel": KERNEL,
            "seed": self.seed,
        }


def des_run(processors: int, rate: float, duration: DurationSpec,
            n_tasks: Optional[int] = None, bundle_size: int = 1,
            seed: int = 0, record_tasks: bool = False) -> SimResult:
    """Discrete-event run of n_tasks through P processors at dispatch rate.

    Constant-duration runs avoid materializing the duration array entirely;
    everything else samples once with the given seed and feeds the kernel.
    """
    if processors < 1:
        raise ValueError("processors must be >= 1")
    if rate <= 0:
        raise ValueError("rate must be positive")
    if bundle_size < 1:
        raise ValueError("bundle_size must be >= 1")
    if duration.kind == "trace":
        n = len(duration.values)
        if n_tasks is not None and n_tasks != n:
            raise ValueError("n_tasks conflicts with trace length")
    else:
        if n_tasks is None:
            raise ValueError("n_tasks is required unless duration is a trace")
        n = int(n_tasks)
    if n < 0:
        raise ValueError("n_tasks must be >= 0")

    if duration.kind == "constant" and not record_tasks:
        makespan, n_msgs = _impl.simulate_const(
            duration.mean, n, processors, rate, bundle_size)
        busy = duration.mean * n
        starts = finishes = None
    else:
        rng = np.random.default_rng(seed)
        durs = np.ascontiguousarray(duration.sample(n, rng), dtype=np.float64)
        makespan, n_msgs, starts, finishes = _impl.simulate_array(
            durs, processors, rate, bundle_size, record_tasks)
        busy = float(durs.sum())
    return SimResult(
        processors=processors, rate=rate, n_tasks=n, bundle_size=bundle_size,
        duration_kind=duration.kind, makespan=float(makespan),
        busy_time=float(busy), n_messages=int(n_msgs), seed=seed,
        starts=starts, finishes=finishes,
    )


@dataclass(frozen=True)
class RampDownReport:
    efficiency_varied: float
    efficiency_constant: float

    @property
    def loss(self) -> float:
        return self.efficiency_constant - self.efficiency_varied


def ramp_down_loss(duration: DurationSpec, processors: int, n_tasks: int,
                   rate: float, seed: int = 0) -> RampDownReport:
    """Efficiency lost to duration spread: the same workload is run once with
    durations drawn from `duration` (i.i.d.) and once with every task pinned
    to the distribution mean. Constant inputs lose exactly nothing."""
    varied = des_run(processors, rate, duration, n_tasks, seed=seed)
    flat = des_run(processors, rate, constant(duration.mean_value()), n_tasks)
    return RampDownReport(varied.efficiency, flat.efficiency)


def efficiency_sweep(processors: int, rate: float, task_lengths,
                     waves: int = 5, seed: int = 0) -> list[SimResult]:
    """des_run across task lengths at a fixed wave count (n = waves * P)."""
    return [
        des_run(processors, rate, constant(t), waves * processors, seed=seed)
        for t in task_lengths
    ]
