"""Client side of the dispatch protocol: submission, status, control."""

from __future__ import annotations

import asyncio
import json
import secrets
import time
from collections import deque
from typing import Callable, Iterable, Optional

from .proto import (
    Ack, DispatchMode, FrameDecoder, MsgKind, ProtocolError, Register, Role,
    Shutdown, StatusQuery, StatusReply, Submit, SubmitReply, SubmitStatus,
    TaskSpec, encode_frame,
)

SUBMIT_CHUNK = 400           # specs per Submit frame
SUBMIT_WINDOW = 4            # unacknowledged frames in flight


class DispatcherClient:
    """Async client for one dispatcher connection."""

    def __init__(self, host: str, port: int) -> None:
        self.host = host
        self.port = port
        self.client_id = secrets.randbits(63) | 1
        self.run_id: Optional[str] = None
        self.epoch_ns: int = 0
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._decoder = FrameDecoder()
        self._pending: deque = deque()

    async def __aenter__(self) -> "DispatcherClient":
        await self.connect()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def connect(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            try:
                self._reader, self._writer = await asyncio.open_connection(
                    self.host, self.port)
                break
            except OSError:
                if time.monotonic() >= deadline:
                    raise
                await asyncio.sleep(0.05)
        self._writer.write(encode_frame(self.client_id, Register(
            Role.CLIENT, DispatchMode.PUSH, 0, "client")))
        await self._writer.drain()
        msg = await self._read_message()
        if not isinstance(msg, Ack) or msg.acked_kind != MsgKind.REGISTER:
            raise ProtocolError(f"expected Register ack, got {msg!r}")
        self.epoch_ns = msg.value
        self.run_id = json.loads(msg.info or b"{}").get("run_id")

    async def _read_message(self):
        while not self._pending:
            data = await self._reader.read(65536)
            if not data:
                raise ConnectionResetError("dispatcher closed the connection")
            self._pending.extend(
                msg for _, msg in self._decoder.feed(data))
        return self._pending.popleft()

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (OSError, ConnectionError):
                pass
            self._writer = None

    # ---- operations ------------------------------------------------------

    async def submit(self, specs: Iterable[TaskSpec],
                     progress: Optional[Callable[[int, int], None]] = None
                     ) -> dict[bytes, SubmitStatus]:
        """Submit specs in windowed chunks; returns per-task statuses."""
        specs = list(specs)
        statuses: dict[bytes, SubmitStatus] = {}
        pending: dict[int, int] = {}  # seq -> chunk size
        acked = 0
        seq = 0
        i = 0

        async def read_reply() -> None:
            nonlocal acked
            msg = await self._read_message()
            if not isinstance(msg, SubmitReply):
                raise ProtocolError(f"expected SubmitReply, got {msg!r}")
            for task_id, status in msg.statuses:
                statuses[task_id] = status
            acked += pending.pop(msg.seq)
            if progress is not None:
                progress(acked, len(specs))

        while i < len(specs) or pending:
            if i < len(specs) and len(pending) < SUBMIT_WINDOW:
                chunk = specs[i:i + SUBMIT_CHUNK]
                self._writer.write(encode_frame(
                    self.client_id, Submit(seq, tuple(chunk))))
                await self._writer.drain()
                pending[seq] = len(chunk)
                seq += 1
                i += len(chunk)
            else:
                await read_reply()
        return statuses

    async def status(self) -> dict:
        self._writer.write(encode_frame(self.client_id, StatusQuery()))
        await self._writer.drain()
        msg = await self._read_message()
        if not isinstance(msg, StatusReply):
            raise ProtocolError(f"expected StatusReply, got {msg!r}")
        return json.loads(msg.payload)

    async def wait_drained(self, poll_s: float = 0.1,
                           timeout: Optional[float] = None,
                           on_status: Optional[Callable[[dict], None]] = None
                           ) -> dict:
        """Poll until every submitted task is done or failed."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            st = await self.status()
            if on_status is not None:
                on_status(st)
            if st["submitted"] > 0 and st["queued"] == 0 \
                    and st["dispatched"] == 0:
                return st
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError(f"run not drained after {timeout}s: {st}")
            await asyncio.sleep(poll_s)

    async def shutdown(self, drain: bool = True) -> None:
        self._writer.write(encode_frame(self.client_id, Shutdown(drain)))
        await self._writer.drain()


async def fetch_status(host: str, port: int) -> dict:
    async with DispatcherClient(host, port) as client:
        return await client.status()
