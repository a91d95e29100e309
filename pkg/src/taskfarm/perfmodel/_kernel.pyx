# cython: language_level=3
"""Compiled discrete-event kernel.

Mirrors _kernel_py exactly: one dispatch server at 1/rate per message, FIFO
tasks gated on outstanding < processors, bundle tasks per message, heap ties
broken by insertion sequence. The heap holds at most processors+bundle
entries, so it lives in two flat C arrays.
"""

from libc.stdlib cimport free as c_free, malloc

import numpy as np


cdef struct Heap:
    double *key
    long *seq
    long size


cdef inline void heap_push(Heap *h, double key, long seq) nogil:
    cdef long i = h.size
    cdef long parent
    h.size += 1
    while i > 0:
        parent = (i - 1) >> 1
        if h.key[parent] < key or (h.key[parent] == key and h.seq[parent] < seq):
            break
        h.key[i] = h.key[parent]
        h.seq[i] = h.seq[parent]
        i = parent
    h.key[i] = key
    h.seq[i] = seq


cdef inline double heap_pop(Heap *h) nogil:
    cdef double top = h.key[0]
    h.size -= 1
    cdef double key = h.key[h.size]
    cdef long seq = h.seq[h.size]
    cdef long i = 0, child
    while True:
        child = 2 * i + 1
        if child >= h.size:
            break
        if child + 1 < h.size and (
            h.key[child + 1] < h.key[child]
            or (h.key[child + 1] == h.key[child] and h.seq[child + 1] < h.seq[child])
        ):
            child += 1
        if h.key[child] < key or (h.key[child] == key and h.seq[child] < seq):
            h.key[i] = h.key[child]
            h.seq[i] = h.seq[child]
            i = child
        else:
            break
    h.key[i] = key
    h.seq[i] = seq
    return top


def simulate_array(double[::1] durations, long processors, double rate,
                   long bundle=1, bint record=False):
    """Simulate tasks with per-task durations, in order.

    Returns (makespan, n_messages, starts, finishes); arrays are None unless
    record is true.
    """
    cdef long n = durations.shape[0]
    starts_arr = np.zeros(n) if record else None
    fin_arr = np.zeros(n) if record else None
    if n == 0:
        return 0.0, 0, starts_arr, fin_arr
    cdef double[::1] starts = starts_arr if record else durations
    cdef double[::1] finishes = fin_arr if record else durations

    cdef long cap = processors + bundle + 2
    cdef Heap h
    h.key = <double *> malloc(cap * sizeof(double))
    h.seq = <long *> malloc(cap * sizeof(long))
    cdef long *waiting = <long *> malloc(cap * sizeof(long))
    if h.key == NULL or h.seq == NULL or waiting == NULL:
        c_free(h.key); c_free(h.seq); c_free(waiting)
        raise MemoryError
    h.size = 0
    cdef long w_head = 0, w_tail = 0, w_count = 0

    cdef double per_msg = 1.0 / rate
    cdef long free_procs = processors
    cdef long outstanding = 0
    cdef double disp_free = 0.0, now = 0.0, makespan = 0.0
    cdef double t_d, fin
    cdef long i = 0, seq = 0, n_msgs = 0, k, j, m

    with nogil:
        while i < n or h.size > 0:
            if i < n and outstanding < processors:
                t_d = (disp_free if disp_free > now else now) + per_msg
                disp_free = t_d
                n_msgs += 1
                k = bundle if bundle < n - i else n - i
                for m in range(k):
                    outstanding += 1
                    if free_procs > 0:
                        free_procs -= 1
                        fin = t_d + durations[i]
                        heap_push(&h, fin, seq)
                        seq += 1
                        if record:
                            starts[i] = t_d
                            finishes[i] = fin
                    else:
                        waiting[w_tail] = i
                        w_tail += 1
                        if w_tail == cap:
                            w_tail = 0
                        w_count += 1
                    i += 1
            else:
                fin = heap_pop(&h)
                if fin > now:
                    now = fin
                if fin > makespan:
                    makespan = fin
                free_procs += 1
                outstanding -= 1
                if w_count > 0:
                    j = waiting[w_head]
                    w_head += 1
                    if w_head == cap:
                        w_head = 0
                    w_count -= 1
                    free_procs -= 1
                    fin = now + durations[j]
                    heap_push(&h, fin, seq)
                    seq += 1
                    if record:
                        starts[j] = now
                        finishes[j] = fin

    c_free(h.key)
    c_free(h.seq)
    c_free(waiting)
    return makespan, n_msgs, starts_arr, fin_arr


def simulate_const(double duration, long n, long processors, double rate,
                   long bundle=1):
    """Same event semantics for n identical tasks, without the arrays."""
    if n == 0:
        return 0.0, 0
    cdef long cap = processors + bundle + 2
    cdef Heap h
    h.key = <double *> malloc(cap * sizeof(double))
    h.seq = <long *> malloc(cap * sizeof(long))
    if h.key == NULL or h.seq == NULL:
        c_free(h.key); c_free(h.seq)
        raise MemoryError
    h.size = 0

    cdef double per_msg = 1.0 / rate
    cdef long free_procs = processors
    cdef long outstanding = 0
    cdef double disp_free = 0.0, now = 0.0, makespan = 0.0
    cdef double t_d, fin
    cdef long i = 0, seq = 0, n_msgs = 0, n_waiting = 0, k, m

    with nogil:
        while i < n or h.size > 0:
            if i < n and outstanding < processors:
                t_d = (disp_free if disp_free > now else now) + per_msg
                disp_free = t_d
                n_msgs += 1
                k = bundle if bundle < n - i else n - i
                for m in range(k):
                    outstanding += 1
                    if free_procs > 0:
                        free_procs -= 1
                        heap_push(&h, t_d + duration, seq)
                        seq += 1
                    else:
                        n_waiting += 1
                    i += 1
            else:
                fin = heap_pop(&h)
                if fin > now:
                    now = fin
                if fin > makespan:
                    makespan = fin
                free_procs += 1
                outstanding -= 1
                if n_waiting > 0:
                    n_waiting -= 1
                    free_procs -= 1
                    heap_push(&h, now + duration, seq)
                    seq += 1

    c_free(h.key)
    c_free(h.seq)
    return makespan, n_msgs
