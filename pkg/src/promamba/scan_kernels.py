"""Compiled float32 kernels for the first-order linear recurrence.

Both kernels accumulate the running state in float64 and store float32, so
the sequential and blocked evaluations agree to the output ULP. The blocked
kernel parallelizes its up-sweep (per-chunk reductions of the pair
combinator) and down-sweep (per-chunk replay from the scanned carries) over
chunks; chunk independence makes the result identical for any thread count.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange


@njit(cache=True)
def scan_seq_f32(a, b, h):  # pragma: no cover - compiled
    L, C = a.shape
    state = np.zeros(C, dtype=np.float64)
    for t in range(L):
        for c in range(C):
            state[c] = state[c] * a[t, c] + b[t, c]
            h[t, c] = state[c]


@njit(parallel=True, cache=True)
def scan_blocked_f32(a, b, h, m):  # pragma: no cover - compiled
    L, C = a.shape
    k = L // m
    decays = np.empty((k, C), dtype=np.float64)
    states = np.empty((k, C), dtype=np.float64)
    for i in prange(k):
        state = np.zeros(C, dtype=np.float64)
        decay = np.ones(C, dtype=np.float64)
        for t in range(i * m, (i + 1) * m):
            for c in range(C):
                state[c] = state[c] * a[t, c] + b[t, c]
                decay[c] = decay[c] * a[t, c]
        decays[i] = decay
        states[i] = state
    carries = np.zeros((k + 1, C), dtype=np.float64)
    for i in range(k):
        for c in range(C):
            carries[i + 1, c] = carries[i, c] * decays[i, c] + states[i, c]
    for i in prange(k):
        state = carries[i].copy()
        for t in range(i * m, (i + 1) * m):
            for c in range(C):
                state[c] = state[c] * a[t, c] + b[t, c]
                h[t, c] = state[c]
    state = carries[k].copy()
    for t in range(k * m, L):
        for c in range(C):
            state[c] = state[c] * a[t, c] + b[t, c]
            h[t, c] = state[c]


def run_seq_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a2 = np.ascontiguousarray(a.reshape(a.shape[0], -1))
    b2 = np.ascontiguousarray(b.reshape(a2.shape))
    h = np.empty_like(b2)
    scan_seq_f32(a2, b2, h)
    return h.reshape(b.shape)


def run_blocked_f32(a: np.ndarray, b: np.ndarray, block: int, workers: int) -> np.ndarray:
    a2 = np.ascontiguousarray(a.reshape(a.shape[0], -1))
    b2 = np.ascontiguousarray(b.reshape(a2.shape))
    h = np.empty_like(b2)
    workers = max(1, min(workers, numba.config.NUMBA_NUM_THREADS))
    prev = numba.get_num_threads()
    numba.set_num_threads(workers)
    try:
        scan_blocked_f32(a2, b2, h, block)
    finally:
        numba.set_num_threads(prev)
    return h.reshape(b.shape)
