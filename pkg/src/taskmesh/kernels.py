"""Synthetic kernels: a calibrated busy loop plus a checkable data transform.

A kernel's compute side is a plain counting loop sized in abstract
iterations.  Its data side is deterministic: every written buffer is
filled with a pattern derived from a digest of the task id, the
iteration count, and the full content of every input buffer, so any
execution order that respects the dependency graph produces the same
final bytes as a serial run and correctness can be checked per bit.

In simulated runs the loop is not spun; its duration is charged to the
virtual clock at a fixed rate of ``SIM_ITERATIONS_PER_US`` (10M
iterations = 50 ms).  Real (TCP) runs calibrate the loop at startup.
"""

from __future__ import annotations

import hashlib
import struct
import time
from typing import Callable, Protocol, Sequence

SIM_ITERATIONS_PER_US = 200

Inputs = Sequence[tuple[int, bytes]]
Writes = Sequence[tuple[int, int]]
Outputs = list[tuple[int, bytes]]
DoneCallback = Callable[[Outputs, int], None]


def kernel_digest(task_id: int, iterations: int, inputs: Inputs) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<QQ", task_id, iterations))
    for bid, data in inputs:
        h.update(struct.pack("<QI", bid, len(data)))
        h.update(data)
    return h.digest()


def output_content(digest: bytes, buffer_id: int, size: int) -> bytes:
    h = hashlib.blake2b(digest + struct.pack("<Q", buffer_id), digest_size=16)
    pattern = h.digest()
    reps = -(-size // len(pattern))
    return (pattern * reps)[:size]


def run_transform(task_id: int, iterations: int, inputs: Inputs, writes: Writes) -> Outputs:
    digest = kernel_digest(task_id, iterations, inputs)
    return [(bid, output_content(digest, bid, size)) for bid, size in writes]


def busy_loop(iterations: int) -> None:
    i = 0
    while i < iterations:
        i += 1


def calibrate(sample_s: float = 0.02, samples: int = 5) -> float:
    """Measured busy-loop rate in iterations per microsecond (median)."""
    # rough sizing pass
    n = 100_000
    while True:
        t0 = time.perf_counter()
        busy_loop(n)
        dt = time.perf_counter() - t0
        if dt >= sample_s / 4 or n >= 200_000_000:
            break
        n *= 4
    target = max(1, int(n * sample_s / max(dt, 1e-9)))
    rates = []
    for _ in range(samples):
        t0 = time.perf_counter()
        busy_loop(target)
        dt = time.perf_counter() - t0
        rates.append(target / (dt * 1e6))
    rates.sort()
    return rates[len(rates) // 2]


class KernelRunner(Protocol):
    """begin() either finishes synchronously, returning (outputs,
    elapsed_us), or returns None and invokes on_done later."""

    def begin(self, task_id: int, iterations: int, inputs: Inputs, writes: Writes,
              on_done: DoneCallback) -> tuple[Outputs, int] | None: ...


class InlineKernelRunner:
    """Real execution: spin the loop on the calling handler thread."""

    def __init__(self, rate_ipus: float | None = None):
        self.rate_ipus = rate_ipus  # kept for duration estimates; loop is real

    def begin(self, task_id: int, iterations: int, inputs: Inputs, writes: Writes,
              on_done: DoneCallback) -> tuple[Outputs, int] | None:
        t0 = time.perf_counter_ns()
        busy_loop(iterations)
        outputs = run_transform(task_id, iterations, inputs, writes)
        elapsed_us = (time.perf_counter_ns() - t0) // 1000
        return outputs, int(elapsed_us)
