"""Static whole-graph scheduling with an adapted HEFT list scheduler.

The graph is mapped to nodes once, at the program barrier.  Tasks are
prioritised by upward rank (own average cost plus the heaviest
successor chain including edge communication) and placed in
non-increasing rank order using insertion-based earliest-finish-time
selection over the worker nodes.  Two adaptations on top of the
classical algorithm:

* host tasks are unconditionally pinned to the head node (node 0);
* pure data-movement tasks are never placed independently -- each one is
  assigned to the same node as the first-scheduled task adjacent to it,
  so a transfer is never routed through an unrelated intermediate node.

Node ids: 0 is the head, 1..p are workers.  All durations are in
microseconds.  Scheduling is a pure function of its immutable inputs.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .graph import Task, TaskGraph, TaskKind

_TIE_EPS = 1e-9


class NoWorkersError(Exception):
    """The graph contains target tasks but the model has zero workers."""


@dataclass(frozen=True)
class CostModel:
    """Compute and communication cost estimates for scheduling.

    ``workers`` is the worker-node count p.  Transfer of n bytes between
    two distinct nodes costs ``latency_us + n / bandwidth_bpus``; a
    same-node transfer is free.  ``node_speed`` optionally scales
    per-node compute times (index 0 = head, 1..p = workers, default
    homogeneous).
    """

    workers: int
    latency_us: float = 5.0
    bandwidth_bpus: float = 1.0
    node_speed: Sequence[float] | None = None

    def __post_init__(self) -> None:
        if self.workers < 0:
            raise ValueError("worker count must be >= 0")
        if self.bandwidth_bpus <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_us < 0:
            raise ValueError("latency must be >= 0")
        if self.node_speed is not None and len(self.node_speed) != self.workers + 1:
            raise ValueError("node_speed must have workers + 1 entries")

    def speed(self, node: int) -> float:
        return 1.0 if self.node_speed is None else float(self.node_speed[node])

    def comm_time_us(self, nbytes: int, src: int, dst: int) -> float:
        if src == dst:
            return 0.0
        return self.latency_us + nbytes / self.bandwidth_bpus

    def inter_comm_us(self, nbytes: int) -> float:
        return self.latency_us + nbytes / self.bandwidth_bpus

    def transfer_estimate_us(self, graph: TaskGraph, task: Task) -> float:
        return sum(self.inter_comm_us(graph.buffer(b).size_bytes) for b, _ in task.deps)

    def compute_time_us(self, graph: TaskGraph, task: Task, node: int) -> float:
        if task.kind is TaskKind.HOST:
            return task.cost_estimate_us * self.speed(0)
        if task.kind is TaskKind.TARGET:
            return task.cost_estimate_us * self.speed(node)
        return self.transfer_estimate_us(graph, task)

    def avg_compute_us(self, graph: TaskGraph, task: Task) -> float:
        if task.kind is TaskKind.TARGET:
            if self.workers == 0:
                raise NoWorkersError("target task with no worker nodes")
            return sum(
                task.cost_estimate_us * self.speed(n) for n in range(1, self.workers + 1)
            ) / self.workers
        return self.compute_time_us(graph, task, 0)


@dataclass(frozen=True)
class Schedule:
    """Task-to-node assignment with start/finish estimates."""

    assignment: Mapping[int, int]
    est: Mapping[int, float]
    eft: Mapping[int, float]
    node_tasks: Mapping[int, tuple[int, ...]]
    makespan: float
    eft_evaluations: int
    placement_seq: tuple[int, ...] = field(default=())

    def placement_index(self, task_id: int) -> int:
        return self.placement_seq.index(task_id)


def _edge_cost_us(graph: TaskGraph, cm: CostModel, u: int, v: int) -> float:
    """Total inter-node communication cost of all buffers connecting u->v."""
    return sum(
        cm.inter_comm_us(graph.buffer(b).size_bytes) for b in graph.pair_buffers[(u, v)]
    )


def upward_rank(graph: TaskGraph, cm: CostModel) -> dict[int, float]:
    """Priority of each task: avg cost + max successor (edge comm + rank).

    Sinks rank at their own average cost.  Edges only go from lower to
    higher task id, so a single reverse-id sweep evaluates the
    recurrence bottom-up.
    """
    rank: dict[int, float] = {}
    for task in reversed(graph.tasks):
        best = 0.0
        for s in graph.successors[task.id]:
            val = _edge_cost_us(graph, cm, task.id, s) + rank[s]
            if val > best:
                best = val
        rank[task.id] = cm.avg_compute_us(graph, task) + best
    return rank


class _Timeline:
    """Non-overlapping busy intervals of one node, sorted by start."""

    __slots__ = ("starts", "ends", "ids")

    def __init__(self) -> None:
        self.starts: list[float] = []
        self.ends: list[float] = []
        self.ids: list[int] = []

    def clone(self) -> "_Timeline":
        tl = _Timeline.__new__(_Timeline)
        tl.starts = self.starts[:]
        tl.ends = self.ends[:]
        tl.ids = self.ids[:]
        return tl

    def earliest(self, ready: float, duration: float) -> float:
        """Earliest start >= ready fitting `duration`, scanning idle gaps."""
        starts, ends = self.starts, self.ends
        i = bisect.bisect_right(starts, ready)
        prev_end = ends[i - 1] if i else 0.0
        while i < len(starts):
            begin = ready if ready > prev_end else prev_end
            if begin + duration <= starts[i] + _TIE_EPS:
                return begin
            prev_end = ends[i]
            i += 1
        return ready if ready > prev_end else prev_end

    def insert(self, task_id: int, start: float, duration: float) -> None:
        i = bisect.bisect_right(self.starts, start)
        self.starts.insert(i, start)
        self.ends.insert(i, start + duration)
        self.ids.insert(i, task_id)


def _adjacent_tasks(graph: TaskGraph, task_id: int) -> list[int]:
    return sorted(set(graph.successors[task_id]) | set(graph.predecessors[task_id]))


def heft_schedule(graph: TaskGraph, cm: CostModel) -> Schedule:
    """Map the whole graph to nodes; returns assignments and time estimates.

    Processing order is non-increasing upward rank, ties broken by lower
    task id (which preserves topological order).  Target tasks take the
    worker minimising insertion-based EFT (equal EFTs go to the lower
    node id); host tasks go to node 0.  A data task is placed on the
    node of its first-scheduled adjacent task: exit-style tasks are
    placed when popped (their producer is always scheduled by then),
    while enter-style tasks are carried as pending predecessors and
    committed-- in program order, ahead of the consumer -- during the
    consumer's own placement, so they are included in every candidate
    evaluation.
    """
    tasks = graph.tasks
    if any(t.kind is TaskKind.TARGET for t in tasks) and cm.workers == 0:
        raise NoWorkersError("graph contains target tasks but no workers exist")

    ranks = upward_rank(graph, cm)
    order = sorted((t.id for t in tasks), key=lambda tid: (-ranks[tid], tid))

    assignment: dict[int, int] = {}
    est: dict[int, float] = {}
    eft: dict[int, float] = {}
    placement_seq: list[int] = []
    timelines = {n: _Timeline() for n in range(cm.workers + 1)}
    evaluations = 0

    def ready_time(task: Task, node: int, extra: dict[int, tuple[int, float]]) -> float:
        ready = 0.0
        for u in graph.predecessors[task.id]:
            if u in eft:
                u_node, u_eft = assignment[u], eft[u]
            elif u in extra:
                u_node, u_eft = extra[u]
            else:
                continue  # unplaced pred: unreachable for valid pop order
            arrival = u_eft
            if u_node != node:
                arrival += _edge_cost_us(graph, cm, u, task.id)
            if arrival > ready:
                ready = arrival
        return ready

    def pending_data_preds(task: Task) -> list[int]:
        """Unplaced data-task predecessors of `task`, transitively, id order."""
        found: set[int] = set()
        stack = [u for u in graph.predecessors[task.id]
                 if u not in assignment and tasks[u].kind.is_data]
        while stack:
            d = stack.pop()
            if d in found:
                continue
            found.add(d)
            stack.extend(u for u in graph.predecessors[d]
                         if u not in assignment and tasks[u].kind.is_data)
        return sorted(found)

    def evaluate(task: Task, node: int, pendings: list[int]) -> tuple[float, list[tuple[int, float, float]]]:
        """EFT of `task` on `node` with pendings placed first on the same node."""
        nonlocal evaluations
        tl = timelines[node].clone() if pendings else timelines[node]
        extra: dict[int, tuple[int, float]] = {}
        placed: list[tuple[int, float, float]] = []
        for d in pendings:
            dur = cm.compute_time_us(graph, tasks[d], node)
            start = tl.earliest(ready_time(tasks[d], node, extra), dur)
            tl.insert(d, start, dur)
            extra[d] = (node, start + dur)
            placed.append((d, start, start + dur))
            evaluations += 1
        dur = cm.compute_time_us(graph, task, node)
        start = tl.earliest(ready_time(task, node, extra), dur)
        evaluations += 1
        return start + dur, placed + [(task.id, start, start + dur)]

    def commit(node: int, placements: list[tuple[int, float, float]]) -> None:
        for tid, start, finish in placements:
            assignment[tid] = node
            est[tid] = start
            eft[tid] = finish
            timelines[node].insert(tid, start, finish - start)
            placement_seq.append(tid)

    for tid in order:
        task = tasks[tid]
        if tid in assignment:
            continue
        if task.kind.is_data:
            placed_adjacent = [a for a in _adjacent_tasks(graph, tid)
                               if a in assignment and not tasks[a].kind.is_data]
            if not placed_adjacent:
                continue  # deferred: committed alongside its first consumer
            node = assignment[min(placed_adjacent, key=placement_seq.index)]
            _, placements = evaluate(task, node, [])
            commit(node, placements)
        elif task.kind is TaskKind.HOST:
            pendings = pending_data_preds(task)
            _, placements = evaluate(task, 0, pendings)
            commit(0, placements)
        else:  # TARGET
            pendings = pending_data_preds(task)
            best_node, best_eft, best_placements = -1, float("inf"), None
            for node in range(1, cm.workers + 1):
                finish, placements = evaluate(task, node, pendings)
                if finish < best_eft - _TIE_EPS:
                    best_node, best_eft, best_placements = node, finish, placements
            commit(best_node, best_placements)

    # Data tasks adjacent only to other data tasks never trigger the
    # pending path; fall back to the first-placed data neighbour or head.
    for task in tasks:
        if task.id in assignment:
            continue
        placed_adjacent = [a for a in _adjacent_tasks(graph, task.id) if a in assignment]
        node = assignment[min(placed_adjacent, key=placement_seq.index)] if placed_adjacent else 0
        _, placements = evaluate(task, node, [])
        commit(node, placements)

    node_tasks = {
        n: tuple(sorted((tid for tid, a in assignment.items() if a == n), key=lambda t: (est[t], t)))
        for n in range(cm.workers + 1)
    }
    makespan = max(eft.values()) if eft else 0.0
    return Schedule(
        assignment=assignment,
        est=est,
        eft=eft,
        node_tasks=node_tasks,
        makespan=makespan,
        eft_evaluations=evaluations,
        placement_seq=tuple(placement_seq),
    )


def schedule_cost(schedule: Schedule) -> int:
    """Number of candidate EFT evaluations the scheduling run performed."""
    return schedule.eft_evaluations


def check_schedule(graph: TaskGraph, cm: CostModel, schedule: Schedule, tol: float = 1e-6) -> list[str]:
    """Independent post-hoc validation of a schedule.

    Re-walks every edge and every node timeline: assignment domain and
    pinning, per-edge precedence including communication delay for
    cross-node edges, non-overlap of each node's intervals, data-task
    co-location with the first-placed adjacent task, duration and
    makespan consistency.  Returns a list of violations (empty = valid).
    """
    v: list[str] = []
    for task in graph.tasks:
        if task.id not in schedule.assignment:
            v.append(f"task {task.id} unassigned")
            continue
        node = schedule.assignment[task.id]
        if not 0 <= node <= cm.workers:
            v.append(f"task {task.id} assigned to out-of-range node {node}")
        if task.kind is TaskKind.HOST and node != 0:
            v.append(f"host task {task.id} not pinned to head (node {node})")
        if task.kind is TaskKind.TARGET and node == 0:
            v.append(f"target task {task.id} placed on the head node")
        dur = cm.compute_time_us(graph, task, node)
        if abs(schedule.eft[task.id] - schedule.est[task.id] - dur) > tol:
            v.append(f"task {task.id}: eft != est + compute time")
        if schedule.est[task.id] < -tol:
            v.append(f"task {task.id}: negative start time")

    for u, w, b in sorted(graph.edges):
        nu, nw = schedule.assignment.get(u), schedule.assignment.get(w)
        if nu is None or nw is None:
            continue
        delay = cm.comm_time_us(graph.buffer(b).size_bytes, nu, nw)
        if schedule.est[w] + tol < schedule.eft[u] + delay:
            v.append(f"edge {u}->{w} (buffer {b}): start before producer finish + comm")

    for node, tids in schedule.node_tasks.items():
        prev_end, prev_t = 0.0, None
        for tid in tids:
            if prev_t is not None and schedule.est[tid] + tol < prev_end:
                v.append(f"node {node}: tasks {prev_t} and {tid} overlap")
            prev_end, prev_t = schedule.eft[tid], tid

    for task in graph.tasks:
        if not task.kind.is_data or task.id not in schedule.assignment:
            continue
        adjacent = [a for a in _adjacent_tasks(graph, task.id)
                    if a in schedule.assignment and not graph.tasks[a].kind.is_data]
        if adjacent:
            first = min(adjacent, key=schedule.placement_index)
            if schedule.assignment[task.id] != schedule.assignment[first]:
                v.append(f"data task {task.id} not co-located with adjacent task {first}")

    if schedule.eft:
        top = max(schedule.eft.values())
        if abs(top - schedule.makespan) > tol:
            v.append("makespan does not equal max finish time")
    return v


def schedule_to_csv(schedule: Schedule) -> str:
    """Render a schedule as ``task_id,node,est_us,eft_us`` rows."""
    lines = ["task_id,node,est_us,eft_us"]
    for tid in sorted(schedule.assignment):
        lines.append(
            f"{tid},{schedule.assignment[tid]},{schedule.est[tid]:.3f},{schedule.eft[tid]:.3f}"
        )
    return "\n".join(lines) + "\n"
