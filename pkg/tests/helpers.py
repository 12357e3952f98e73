"""Shared test utilities: random program generators and independent oracles.

The oracles here deliberately re-derive results from first principles
(pairwise scans, memoized recursion, a from-scratch list scheduler) so
they share no code path with the implementations they check.
"""

from __future__ import annotations

import random
from typing import Sequence

from taskmesh.graph import (
    DepDirection,
    KernelSpec,
    Program,
    TaskGraph,
    TaskKind,
)
from taskmesh.scheduler import CostModel

DIRS = (DepDirection.IN, DepDirection.OUT, DepDirection.INOUT)


# ---------------------------------------------------------------------------
# random programs


def random_program(
    rng: random.Random,
    max_tasks: int = 10,
    max_buffers: int = 3,
    max_size: int = 64,
    with_data_tasks: bool = True,
    host_fraction: float = 0.15,
) -> Program:
    """A random well-formed program: optional enter/exit wrapping around a
    mix of target and host tasks with random dependency directions."""
    program = Program()
    nbuf = rng.randint(1, max_buffers)
    bufs = [
        program.add_buffer(rng.randint(1, max_size), rng.randbytes(0) or None)
        for _ in range(nbuf)
    ]
    for b in bufs:
        # overwrite zero-initialised content with random bytes
        program._initial[b] = rng.randbytes(program.buffers[b].size_bytes)
    if with_data_tasks:
        for b in bufs:
            program.add_task(TaskKind.DATA_ENTER, [(b, DepDirection.OUT)])
    ntasks = rng.randint(1, max_tasks)
    for _ in range(ntasks):
        chosen = rng.sample(bufs, rng.randint(1, nbuf))
        deps = [(b, rng.choice(DIRS)) for b in sorted(chosen)]
        kind = TaskKind.HOST if rng.random() < host_fraction else TaskKind.TARGET
        cost = rng.uniform(100.0, 5000.0) if kind is TaskKind.TARGET else rng.uniform(0.0, 1000.0)
        program.add_task(kind, deps, cost, KernelSpec(iterations=0))
    if with_data_tasks:
        for b in bufs:
            program.add_task(TaskKind.DATA_EXIT, [(b, DepDirection.OUT)], release=True)
    return program


def random_cost_model(rng: random.Random, max_workers: int = 3, heterogeneous: bool = True) -> CostModel:
    p = rng.randint(1, max_workers)
    speeds = None
    if heterogeneous and rng.random() < 0.5:
        speeds = [1.0] + [rng.uniform(0.5, 2.0) for _ in range(p)]
    return CostModel(
        workers=p,
        latency_us=rng.choice([0.0, 1.0, 5.0]),
        bandwidth_bpus=rng.choice([0.5, 1.0, 4.0]),
        node_speed=speeds,
    )


# ---------------------------------------------------------------------------
# edge-derivation oracle: O(n^2) pairwise rule application


def oracle_edges(deps_per_task: Sequence[Sequence[tuple[int, DepDirection]]]) -> set[tuple[int, int, int]]:
    """Edge (i, j, b) iff i and j share buffer b, at least one of them
    writes it, and no task strictly between them writes b."""
    def writes(t: int, b: int) -> bool:
        return any(bid == b and d.writes for bid, d in deps_per_task[t])

    def touches(t: int, b: int) -> bool:
        return any(bid == b for bid, _ in deps_per_task[t])

    edges = set()
    n = len(deps_per_task)
    for i in range(n):
        for j in range(i + 1, n):
            shared = {b for b, _ in deps_per_task[i]} & {b for b, _ in deps_per_task[j]}
            for b in shared:
                if not (writes(i, b) or writes(j, b)):
                    continue
                if any(writes(k, b) for k in range(i + 1, j)):
                    continue
                edges.add((i, j, b))
    return edges


# ---------------------------------------------------------------------------
# upward-rank oracle: memoized recursion straight from the definition


def oracle_ranks(graph: TaskGraph, cm: CostModel) -> dict[int, float]:
    memo: dict[int, float] = {}

    def comm(u: int, v: int) -> float:
        return sum(
            cm.latency_us + graph.buffer(b).size_bytes / cm.bandwidth_bpus
            for b in graph.pair_buffers[(u, v)]
        )

    def rank(tid: int) -> float:
        if tid in memo:
            return memo[tid]
        succ = graph.successors[tid]
        tail = max((comm(tid, s) + rank(s) for s in succ), default=0.0)
        memo[tid] = cm.avg_compute_us(graph, graph.tasks[tid]) + tail
        return memo[tid]

    for t in graph.tasks:
        rank(t.id)
    return memo


# ---------------------------------------------------------------------------
# reference HEFT: an independent re-implementation of the scheduling policy
#
# Written from the policy statement alone: rank order (ties by id),
# insertion-based EFT over workers with lower-node tie-break, host tasks on
# node 0, data tasks co-located with their first-scheduled adjacent task
# (enter-style ones placed immediately before the consumer that triggers
# them).  Uses its own timeline representation and recursion.


class ReferenceHEFT:
    def __init__(self, graph: TaskGraph, cm: CostModel):
        self.g = graph
        self.cm = cm
        self.ranks = oracle_ranks(graph, cm)
        self.where: dict[int, int] = {}
        self.start: dict[int, float] = {}
        self.finish: dict[int, float] = {}
        self.order_placed: list[int] = []
        self.busy: dict[int, list[tuple[float, float]]] = {
            n: [] for n in range(cm.workers + 1)
        }

    def comm(self, u: int, v: int, same_node: bool) -> float:
        if same_node:
            return 0.0
        return sum(
            self.cm.latency_us + self.g.buffer(b).size_bytes / self.cm.bandwidth_bpus
            for b in self.g.pair_buffers[(u, v)]
        )

    def duration(self, tid: int, node: int) -> float:
        return self.cm.compute_time_us(self.g, self.g.tasks[tid], node)

    def ready(self, tid: int, node: int) -> float:
        r = 0.0
        for u in self.g.predecessors[tid]:
            if u not in self.finish:
                raise AssertionError(f"pred {u} of {tid} not placed yet")
            r = max(r, self.finish[u] + self.comm(u, tid, self.where[u] == node))
        return r

    def slot(self, node: int, ready: float, dur: float) -> float:
        intervals = sorted(self.busy[node])
        t = ready
        for s, e in intervals:
            if t + dur <= s + 1e-9:
                return t
            t = max(t, e)
        return t

    def place(self, tid: int, node: int) -> None:
        dur = self.duration(tid, node)
        t = self.slot(node, self.ready(tid, node), dur)
        self.busy[node].append((t, t + dur))
        self.where[tid] = node
        self.start[tid] = t
        self.finish[tid] = t + dur
        self.order_placed.append(tid)

    def unplaced_data_preds(self, tid: int) -> list[int]:
        out: set[int] = set()
        def walk(t: int) -> None:
            for u in self.g.predecessors[t]:
                if u not in self.where and self.g.tasks[u].kind.is_data and u not in out:
                    out.add(u)
                    walk(u)
        walk(tid)
        return sorted(out)

    def run(self) -> None:
        order = sorted(self.ranks, key=lambda t: (-self.ranks[t], t))
        for tid in order:
            if tid in self.where:
                continue
            task = self.g.tasks[tid]
            if task.kind.is_data:
                neighbours = sorted(set(self.g.successors[tid]) | set(self.g.predecessors[tid]))
                placed = [a for a in neighbours
                          if a in self.where and not self.g.tasks[a].kind.is_data]
                if not placed:
                    continue
                first = min(placed, key=self.order_placed.index)
                self.place(tid, self.where[first])
            elif task.kind is TaskKind.HOST:
                for d in self.unplaced_data_preds(tid):
                    self.place(d, 0)
                self.place(tid, 0)
            else:
                pend = self.unplaced_data_preds(tid)
                best = None
                for node in range(1, self.cm.workers + 1):
                    saved = (dict(self.where), dict(self.start), dict(self.finish),
                             {n: list(v) for n, v in self.busy.items()}, list(self.order_placed))
                    for d in pend:
                        self.place(d, node)
                    self.place(tid, node)
                    f = self.finish[tid]
                    if best is None or f < best[0] - 1e-9:
                        best = (f, node)
                    (self.where, self.start, self.finish, self.busy, self.order_placed) = saved
                for d in pend:
                    self.place(d, best[1])
                self.place(tid, best[1])
        # leftovers: data tasks adjacent only to data tasks
        for task in self.g.tasks:
            if task.id in self.where:
                continue
            neighbours = sorted(set(self.g.successors[task.id]) | set(self.g.predecessors[task.id]))
            placed = [a for a in neighbours if a in self.where]
            node = self.where[min(placed, key=self.order_placed.index)] if placed else 0
            self.place(task.id, node)


def reference_schedule(graph: TaskGraph, cm: CostModel) -> ReferenceHEFT:
    ref = ReferenceHEFT(graph, cm)
    ref.run()
    return ref


# ---------------------------------------------------------------------------
# serial single-node reference execution (same kernel transform)


def serial_reference(program: Program) -> dict[int, bytes]:
    """Execute the program in order on one address space; the distributed
    runtime must produce identical final buffer contents."""
    from taskmesh.kernels import run_transform

    store = {b.id: program.initial_content(b.id) for b in program.buffers}
    for task in program.tasks:
        if task.kind in (TaskKind.TARGET, TaskKind.HOST):
            reads = [(b, store[b]) for b, d in task.deps if d.reads]
            declared = task.payload.writes if task.payload and task.payload.writes else {}
            writes = [
                (b, declared.get(b, program.buffers[b].size_bytes))
                for b, d in task.deps
                if d.writes
            ]
            iterations = task.payload.iterations if task.payload else 0
            for bid, data in run_transform(task.id, iterations, reads, writes):
                store[bid] = data
    return store
