"""Append-only run journal.

Every run writes one JSON-lines file: a header record followed by events.
The journal is the single source of truth for crash recovery — a restarted
dispatcher replays it to learn what was submitted, what finished, and what
still needs to run — and doubles as the raw material for run statistics and
timeline exports.

Events (all carry `t`, nanoseconds relative to the run epoch):

    reg   worker registered (w, cores, mode, tag)
    lost  worker connection lost (w, reason)
    susp  worker suspended after repeated faults (w)
    sub   task submitted; embeds the full spec so recovery needs nothing else
    dis   task dispatched to a worker (id, w, a=attempt)
    sta   task execution started, reported with its result (id, w)
    fin   task finished successfully (id, w, code=0, dur_ns)
    fail  task attempt failed (id, w, code, cls, detail, a, final)
    req   task requeued (id, reason)

Submission acknowledgements are sent only after the corresponding `sub`
events reach the operating system, so a SIGKILL cannot lose acknowledged
work. The reader tolerates a torn final line.
"""

from __future__ import annotations

import base64
import json
import os
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterator, Optional

from .proto import ErrorClass, InputFile, OutputFile, TaskSpec

FORMAT_VERSION = 1


def new_run_id() -> str:
    return time.strftime("r%Y%m%d-%H%M%S-") + secrets.token_hex(3)


def spec_to_jsonable(spec: TaskSpec) -> dict:
    doc: dict = {"id": spec.task_id.hex(), "cmd": spec.command}
    if spec.payload:
        doc["pl"] = base64.b64encode(spec.payload).decode()
    if spec.inputs:
        doc["in"] = [[f.logical, f.path, int(f.cacheable)] for f in spec.inputs]
    if spec.outputs:
        doc["out"] = [[f.logical, f.path] for f in spec.outputs]
    return doc


def spec_from_jsonable(doc: dict) -> TaskSpec:
    return TaskSpec(
        task_id=bytes.fromhex(doc["id"]),
        command=doc["cmd"],
        payload=base64.b64decode(doc["pl"]) if "pl" in doc else b"",
        inputs=tuple(InputFile(l, p, bool(c)) for l, p, c in doc.get("in", ())),
        outputs=tuple(OutputFile(l, p) for l, p in doc.get("out", ())),
    )


class RunLogWriter:
    """Buffered journal writer; `flush()` pushes buffered lines to the OS."""

    def __init__(self, path: Path, run_id: Optional[str] = None,
                 epoch_ns: Optional[int] = None,
                 resumed: bool = False) -> None:
        self.path = Path(path)
        self.run_id = run_id or new_run_id()
        self.epoch_ns = epoch_ns if epoch_ns is not None else time.time_ns()
        run_id, epoch_ns = self.run_id, self.epoch_ns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        existed = self.path.exists()
        self._f: IO[str] = open(self.path, "a", encoding="utf-8")
        self._buf: list[str] = []
        if not existed or not resumed:
            self._put({
                "kind": "header", "v": FORMAT_VERSION, "run_id": run_id,
                "epoch_ns": epoch_ns,
                "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            })
        else:
            self._put({"kind": "resumed", "t": self._now(),
                       "at": time.strftime("%Y-%m-%dT%H:%M:%S")})
        self.flush()

    def _now(self) -> int:
        return time.time_ns() - self.epoch_ns

    def _put(self, doc: dict) -> None:
        self._buf.append(json.dumps(doc, separators=(",", ":")))

    # -- event emitters -------------------------------------------------

    def worker_registered(self, worker_id: int, cores: int, mode: str,
                          tag: str) -> None:
        self._put({"e": "reg", "t": self._now(), "w": worker_id,
                   "cores": cores, "mode": mode, "tag": tag})

    def worker_lost(self, worker_id: int, reason: str) -> None:
        self._put({"e": "lost", "t": self._now(), "w": worker_id,
                   "reason": reason})

    def worker_suspended(self, worker_id: int) -> None:
        self._put({"e": "susp", "t": self._now(), "w": worker_id})

    def submitted(self, spec: TaskSpec) -> None:
        doc = spec_to_jsonable(spec)
        doc["e"] = "sub"
        doc["t"] = self._now()
        self._put(doc)

    def dispatched(self, task_id: bytes, worker_id: int, attempt: int) -> None:
        self._put({"e": "dis", "t": self._now(), "id": task_id.hex(),
                   "w": worker_id, "a": attempt})

    def started(self, task_id: bytes, worker_id: int, started_ns: int) -> None:
        self._put({"e": "sta", "t": started_ns, "id": task_id.hex(),
                   "w": worker_id})

    def finished(self, task_id: bytes, worker_id: int, finished_ns: int,
                 duration_ns: int) -> None:
        self._put({"e": "fin", "t": finished_ns, "id": task_id.hex(),
                   "w": worker_id, "code": 0, "dur_ns": duration_ns})

    def failed(self, task_id: bytes, worker_id: int, exit_code: int,
               error_class: ErrorClass, detail: str, attempt: int,
               final: bool) -> None:
        self._put({"e": "fail", "t": self._now(), "id": task_id.hex(),
                   "w": worker_id, "code": exit_code, "cls": int(error_class),
                   "detail": detail[:500], "a": attempt, "final": final})

    def requeued(self, task_id: bytes, reason: str) -> None:
        self._put({"e": "req", "t": self._now(), "id": task_id.hex(),
                   "reason": reason})

    # -- lifecycle --------------------------------------------------------

    def flush(self) -> None:
        if self._buf:
            self._f.write("\n".join(self._buf) + "\n")
            self._f.flush()
            self._buf.clear()

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        if not self._f.closed:
            self.flush()
            self._f.close()


# --- reading -----------------------------------------------------------------


def read_runlog(path: Path) -> tuple[dict, list[dict]]:
    """Read a journal; returns (header, events). Tolerates a torn tail line
    (crash artifact) but rejects files that do not start with a header."""
    header: Optional[dict] = None
    events: list[dict] = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError:
                if i == 0:
                    raise ValueError(f"{path}: not a run journal")
                break  # torn final line from a crash
            if i == 0:
                if doc.get("kind") != "header":
                    raise ValueError(f"{path}: missing journal header")
                if doc.get("v") != FORMAT_VERSION:
                    raise ValueError(
                        f"{path}: journal version {doc.get('v')} unsupported")
                header = doc
            elif doc.get("kind") != "resumed":
                events.append(doc)
    if header is None:
        raise ValueError(f"{path}: empty journal")
    return header, events


@dataclass
class ReplayState:
    """What the journal says about a run, for recovery and verification."""

    run_id: str
    epoch_ns: int
    specs: dict[bytes, TaskSpec] = field(default_factory=dict)
    done: set[bytes] = field(default_factory=set)
    failed: set[bytes] = field(default_factory=set)
    attempts: dict[bytes, int] = field(default_factory=dict)
    dispatch_counts: dict[bytes, int] = field(default_factory=dict)
    workers_seen: dict[int, int] = field(default_factory=dict)  # id -> cores
    suspended: set[int] = field(default_factory=set)
    requeues: int = 0
    first_sub_ns: Optional[int] = None
    last_fin_ns: Optional[int] = None

    @property
    def pending(self) -> set[bytes]:
        """Tasks submitted but neither finished nor terminally failed."""
        return set(self.specs) - self.done - self.failed

    @property
    def makespan_s(self) -> float:
        if self.first_sub_ns is None or self.last_fin_ns is None:
            return 0.0
        return max(0.0, (self.last_fin_ns - self.first_sub_ns) / 1e9)


def replay_state(path: Path) -> ReplayState:
    header, events = read_runlog(path)
    st = ReplayState(run_id=header["run_id"], epoch_ns=header["epoch_ns"])
    for ev in events:
        e = ev.get("e")
        if e == "sub":
            task_id = bytes.fromhex(ev["id"])
            st.specs[task_id] = spec_from_jsonable(ev)
            if st.first_sub_ns is None:
                st.first_sub_ns = ev["t"]
        elif e == "fin":
            task_id = bytes.fromhex(ev["id"])
            st.done.add(task_id)
            st.last_fin_ns = ev["t"] if st.last_fin_ns is None \
                else max(st.last_fin_ns, ev["t"])
        elif e == "fail":
            task_id = bytes.fromhex(ev["id"])
            st.attempts[task_id] = max(st.attempts.get(task_id, 0), ev["a"])
            if ev.get("final"):
                st.failed.add(task_id)
        elif e == "dis":
            task_id = bytes.fromhex(ev["id"])
            st.dispatch_counts[task_id] = st.dispatch_counts.get(task_id, 0) + 1
        elif e == "req":
            st.requeues += 1
        elif e == "reg":
            st.workers_seen[ev["w"]] = ev["cores"]
        elif e == "susp":
            st.suspended.add(ev["w"])
    # a success recorded for a task supersedes an earlier terminal failure
    st.failed -= st.done
    return st


def find_run_file(log_dir: Path, run_id: str) -> Path:
    path = Path(log_dir) / f"{run_id}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no journal for run {run_id} under {log_dir}")
    return path
