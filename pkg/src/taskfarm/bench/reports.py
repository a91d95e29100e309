"""Benchmark report output: JSON and CSV files with an environment stamp."""

from __future__ import annotations

import csv
import json
import os
import platform
import sys
import time
from pathlib import Path


def environment_fingerprint() -> dict:
    from taskfarm import __version__
    from taskfarm.perfmodel.engine import KERNEL

    return {
        "taskfarm": __version__,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpus": os.cpu_count(),
        "sim_kernel": KERNEL,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def write_report(report: dict, path: Path) -> None:
    """Write a bench report; .csv writes rows as CSV, anything else JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(report)
    doc.setdefault("environment", environment_fingerprint())
    if path.suffix == ".csv":
        rows = doc.get("rows")
        if not rows:
            raise ValueError("report has no rows; write JSON instead")
        keys = sorted({k for row in rows for k in row})
        with path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
        return
    path.write_text(json.dumps(doc, indent=2, default=str) + "\n")


def export_timeline(batches: list[dict], path: Path) -> None:
    """Dump per-batch timing rows for plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for b in batches for k in b})
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(batches)
