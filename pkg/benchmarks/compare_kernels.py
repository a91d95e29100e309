#!/usr/bin/env python3
"""Compare the compiled discrete-event kernel against the pure-Python twin.

Runs the same scenarios through both implementations, checks the results are
bit-identical, and reports wall time and speedup per scenario.

    python benchmarks/compare_kernels.py
    python benchmarks/compare_kernels.py --scale 0.1 --out kernels.json
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from taskfarm.perfmodel import _kernel_py

try:
    from taskfarm.perfmodel import _kernel
except ImportError:
    _kernel = None

from taskfarm.perfmodel.engine import lognormal_from_mean_sd


@dataclass
class Scenario:
    name: str
    n_tasks: int
    processors: int
    rate: float
    bundle: int
    kind: str  # "constant" | "lognormal"
    task_s: float = 1.0

    def durations(self) -> np.ndarray:
        rng = np.random.default_rng(12345)
        mu, sigma = lognormal_from_mean_sd(660.0, 478.8)
        return np.clip(rng.lognormal(mu, sigma, self.n_tasks), 5.8, 4178.0)


SCENARIOS = [
    Scenario("fill-drain small", 20_000, 256, 500.0, 1, "constant", 4.0),
    Scenario("steady constant", 500_000, 5760, 1000.0, 1, "constant", 64.0),
    Scenario("steady bundled", 500_000, 5760, 1000.0, 10, "constant", 64.0),
    Scenario("heavy-tail trace", 200_000, 5760, 500.0, 1, "lognormal"),
    Scenario("heavy-tail bundled", 200_000, 5760, 500.0, 20, "lognormal"),
]


def run_once(impl, sc: Scenario, durs) -> tuple[float, tuple]:
    t0 = time.perf_counter()
    if sc.kind == "constant":
        out = impl.simulate_const(sc.task_s, sc.n_tasks, sc.processors,
                                  sc.rate, sc.bundle)
    else:
        mk, msgs, _, _ = impl.simulate_array(durs, sc.processors, sc.rate,
                                             sc.bundle, False)
        out = (mk, msgs)
    return time.perf_counter() - t0, out


def best_of(impl, sc: Scenario, durs, repeat: int) -> tuple[float, tuple]:
    best, result = float("inf"), None
    for _ in range(repeat):
        dt, out = run_once(impl, sc, durs)
        if result is not None and out != result:
            raise AssertionError(f"{sc.name}: nondeterministic result")
        best, result = min(best, dt), out
    return best, result


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scale", type=float, default=1.0,
                        help="multiply every scenario's task count")
    parser.add_argument("--repeat", type=int, default=3,
                        help="timing repetitions; best is reported")
    parser.add_argument("--out", help="write results as JSON")
    args = parser.parse_args()

    if _kernel is None:
        print("compiled kernel unavailable; timing pure Python only",
              file=sys.stderr)

    rows = []
    header = (f"{'scenario':<22} {'tasks':>9} {'python':>10} "
              f"{'compiled':>10} {'speedup':>8}  identical")
    print(header)
    print("-" * len(header))
    for sc in SCENARIOS:
        sc.n_tasks = max(1000, int(sc.n_tasks * args.scale))
        durs = sc.durations() if sc.kind == "lognormal" else None
        py_s, py_out = best_of(_kernel_py, sc, durs, args.repeat)
        row = {
            "scenario": sc.name, "n_tasks": sc.n_tasks,
            "processors": sc.processors, "rate": sc.rate,
            "bundle": sc.bundle, "kind": sc.kind,
            "python_s": round(py_s, 6),
            "makespan": py_out[0], "n_messages": py_out[1],
        }
        if _kernel is not None:
            c_s, c_out = best_of(_kernel, sc, durs, args.repeat)
            same = (py_out[0] == c_out[0] and py_out[1] == c_out[1])
            row.update(compiled_s=round(c_s, 6),
                       speedup=round(py_s / c_s, 2) if c_s > 0 else None,
                       identical=same)
            print(f"{sc.name:<22} {sc.n_tasks:>9} {py_s:>9.3f}s "
                  f"{c_s:>9.3f}s {py_s / c_s:>7.1f}x  {same}")
            if not same:
                print(f"  python:   {py_out}", file=sys.stderr)
                print(f"  compiled: {c_out}", file=sys.stderr)
        else:
            print(f"{sc.name:<22} {sc.n_tasks:>9} {py_s:>9.3f}s "
                  f"{'-':>10} {'-':>8}  -")
        rows.append(row)

    ok = all(r.get("identical", True) for r in rows)
    if _kernel is not None:
        geo = float(np.exp(np.mean([np.log(r["speedup"]) for r in rows
                                    if r.get("speedup")])))
        print(f"\ngeometric-mean speedup: {geo:.1f}x; "
              f"results identical: {ok}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"rows": rows, "all_identical": ok}, f, indent=2)
        print(f"written: {args.out}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
