"""Synthetic dependency-pattern workload generator.

Programs are a ``width x steps`` grid of target tasks.  Each cell owns
one buffer (double buffering per cell, so writers never serialise on
their readers): task ``(t, i)`` holds its own cell buffer INOUT and
reads the previous-step cell buffers its pattern prescribes.  Every
cell buffer gets an enter-data task before its step and an exit-data
task (with release) at the end of the program.

Patterns (predecessors of task ``(t, i)``, ``t >= 1``):

* ``trivial``   -- none; the whole grid is independent.
* ``stencil1d`` -- ``(t-1, i-1..i+1)`` clamped at the row edges.
* ``fft``       -- ``(t-1, i)`` and the butterfly partner
  ``(t-1, i XOR 2^((t-1) mod log2(width)))``; width must be a power of
  two.
* ``tree``      -- alternating binary fan-in (pairs combine into the
  lower half) and fan-out (the lower half feeds two consumers each);
  width must be a power of two.

Communication volume is controlled by the compute-to-communication
ratio: buffers are sized so one task's incoming transfers cost
``compute_time / ccr`` under the cost model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from .graph import DepDirection, KernelSpec, Program, TaskKind
from .scheduler import CostModel


class InvalidSpecError(Exception):
    pass


@dataclass(frozen=True)
class BenchSpec:
    pattern: str
    width: int
    steps: int
    iterations_per_task: int
    ccr: float = 1.0
    nodes: int = 1

    def __post_init__(self) -> None:
        if self.width < 1 or self.steps < 1:
            raise InvalidSpecError("width and steps must be >= 1")
        if self.ccr <= 0:
            raise InvalidSpecError("ccr must be positive")
        if self.pattern not in ("trivial", "stencil1d", "fft", "tree"):
            raise InvalidSpecError(f"unknown pattern {self.pattern!r}")
        if self.pattern in ("fft", "tree") and self.width & (self.width - 1):
            raise InvalidSpecError(f"{self.pattern} requires a power-of-two width")


def weak_scaling_spec(pattern: str, nodes: int, iterations_per_task: int,
                      ccr: float = 1.0, steps: int = 32) -> BenchSpec:
    """Grid of 2n x `steps` target tasks for n worker nodes."""
    return BenchSpec(pattern, 2 * nodes, steps, iterations_per_task, ccr, nodes)


def predecessors(spec: BenchSpec, t: int, i: int) -> list[int]:
    """Previous-step columns feeding cell (t, i)."""
    if t == 0 or spec.pattern == "trivial":
        return []
    w = spec.width
    if spec.pattern == "stencil1d":
        return [j for j in (i - 1, i, i + 1) if 0 <= j < w]
    if spec.pattern == "fft":
        if w == 1:
            return [i]
        stage = (t - 1) % (w.bit_length() - 1)
        return sorted({i, i ^ (1 << stage)})
    # tree: odd transitions fan in by pairs, even transitions fan out
    if w == 1:
        return [i]
    if t % 2 == 1:
        return [2 * i, 2 * i + 1] if i < w // 2 else []
    return [i // 2]


def max_indegree(spec: BenchSpec) -> int:
    if spec.steps == 1:
        return 0
    return max(
        len(predecessors(spec, t, i))
        for t in range(1, spec.steps)
        for i in range(spec.width)
    )


def size_buffers(spec: BenchSpec, cost_model: CostModel, compute_us: float) -> int:
    """Bytes per dependency so per-task communication time is compute/ccr.

    With d incoming transfers each costing latency + bytes/bandwidth,
    solving d * (latency + bytes/bandwidth) = compute/ccr gives
    bytes = (compute/ccr - d * latency) * bandwidth / d.  Clamped to
    one byte (with a warning) when the latency alone exceeds the budget.
    """
    d = max_indegree(spec)
    if d == 0:
        return 1
    budget = compute_us / spec.ccr
    if d * cost_model.latency_us > budget:
        warnings.warn(
            f"latency alone exceeds the communication budget "
            f"(d={d}, budget={budget:.1f}us); clamping buffers to 1 byte",
            stacklevel=2,
        )
        return 1
    nbytes = (budget - d * cost_model.latency_us) * cost_model.bandwidth_bpus / d
    return max(1, int(nbytes))


def generate(spec: BenchSpec, cost_model: CostModel, rate_ipus: float = 200.0) -> Program:
    """Build the grid program: enter tasks, target tasks, exit tasks."""
    compute_us = spec.iterations_per_task / rate_ipus
    nbytes = size_buffers(spec, cost_model, compute_us)
    program = Program()
    cell = {}
    for t in range(spec.steps):
        for i in range(spec.width):
            cell[(t, i)] = program.add_buffer(nbytes)
    for t in range(spec.steps):
        for i in range(spec.width):
            program.add_task(TaskKind.DATA_ENTER, [(cell[(t, i)], DepDirection.OUT)])
        for i in range(spec.width):
            deps = [(cell[(t, i)], DepDirection.INOUT)]
            deps += [(cell[(t - 1, j)], DepDirection.IN) for j in predecessors(spec, t, i)]
            program.add_task(
                TaskKind.TARGET,
                deps,
                max(compute_us, 1.0),
                KernelSpec(iterations=spec.iterations_per_task),
            )
    for t in range(spec.steps):
        for i in range(spec.width):
            program.add_task(
                TaskKind.DATA_EXIT, [(cell[(t, i)], DepDirection.OUT)], release=True
            )
    return program


def cross_edge_count(spec: BenchSpec) -> int:
    """Dependency edges between target tasks (excludes enter/exit edges)."""
    return sum(
        len(predecessors(spec, t, i))
        for t in range(1, spec.steps)
        for i in range(spec.width)
    )
