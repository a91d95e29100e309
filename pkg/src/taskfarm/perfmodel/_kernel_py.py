"""Pure-Python discrete-event kernel; reference semantics for the compiled one.

The model: one dispatch server that needs exactly 1/rate seconds per message,
a pool of identical processors, tasks consumed in submission order. A message
carries up to `bundle` tasks and is sent only while fewer than `processors`
tasks are outstanding (at bundle=1 this is precisely "a processor is free").
Tasks that arrive beyond the free pool wait in FIFO order and start the moment
a processor releases. Heap ties break on insertion sequence so results are
reproducible bit-for-bit across kernels.
"""

from __future__ import annotations

import heapq
from collections import deque

import numpy as np


def simulate_array(durations, processors, rate, bundle=1, record=False):
    """Simulate tasks with per-task durations, in order.

    Returns (makespan, n_messages, starts, finishes); the arrays are None
    unless record is true.
    """
    n = len(durations)
    starts = np.zeros(n) if record else None
    finishes = np.zeros(n) if record else None
    if n == 0:
        return 0.0, 0, starts, finishes
    per_msg = 1.0 / rate
    free = processors
    outstanding = 0
    disp_free = 0.0
    now = 0.0
    heap: list[tuple[float, int]] = []
    waiting: deque[int] = deque()
    i = 0
    seq = 0
    makespan = 0.0
    n_msgs = 0
    while i < n or heap:
        if i < n and outstanding < processors:
            t_d = (disp_free if disp_free > now else now) + per_msg
            disp_free = t_d
            n_msgs += 1
            k = bundle if bundle < n - i else n - i
            for _ in range(k):
                outstanding += 1
                if free > 0:
                    free -= 1
                    fin = t_d + durations[i]
                    heapq.heappush(heap, (fin, seq))
                    seq += 1
                    if record:
                        starts[i] = t_d
                        finishes[i] = fin
                else:
                    waiting.append(i)
                i += 1
        else:
            fin, _ = heapq.heappop(heap)
            if fin > now:
                now = fin
            if fin > makespan:
                makespan = fin
            free += 1
            outstanding -= 1
            if waiting:
                j = waiting.popleft()
                free -= 1
                fin2 = now + durations[j]
                heapq.heappush(heap, (fin2, seq))
                seq += 1
                if record:
                    starts[j] = now
                    finishes[j] = fin2
    return makespan, n_msgs, starts, finishes


def simulate_const(duration, n, processors, rate, bundle=1):
    """Same event semantics for n identical tasks, without the arrays."""
    if n == 0:
        return 0.0, 0
    per_msg = 1.0 / rate
    free = processors
    outstanding = 0
    disp_free = 0.0
    now = 0.0
    heap: list[tuple[float, int]] = []
    n_waiting = 0
    i = 0
    seq = 0
    makespan = 0.0
    n_msgs = 0
    while i < n or heap:
        if i < n and outstanding < processors:
            t_d = (disp_free if disp_free > now else now) + per_msg
            disp_free = t_d
            n_msgs += 1
            k = bundle if bundle < n - i else n - i
            for _ in range(k):
                outstanding += 1
                if free > 0:
                    free -= 1
                    heapq.heappush(heap, (t_d + duration, seq))
                    seq += 1
                else:
                    n_waiting += 1
                i += 1
        else:
            fin, _ = heapq.heappop(heap)
            if fin > now:
                now = fin
            if fin > makespan:
                makespan = fin
            free += 1
            outstanding -= 1
            if n_waiting:
                n_waiting -= 1
                free -= 1
                heapq.heappush(heap, (now + duration, seq))
                seq += 1
    return makespan, n_msgs
