"""Task programs and their dependency-derived precedence DAGs.

A :class:`Program` is a serial list of tasks, each annotated with the
buffers it touches and the direction of each access (read, write, or
both).  Sealing the program derives the precedence edges that a correct
parallel execution must honour, using serial-program-order semantics:

* a write is ordered before every later read or write of the same buffer
  up to (and including) the next write -- read-after-write edges, with
  write-after-write collapsing onto the most recent writer;
* every read is ordered before the next write of the buffer
  (write-after-read edges, materialised rather than renamed away);
* two reads never create an edge.

Task ids are dense and assigned in program order, so every derived edge
goes from a lower id to a higher id and the result is a DAG by
construction.  The sealed :class:`TaskGraph` is immutable and safe to
share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence


class GraphError(Exception):
    """Base class for program construction errors."""


class UnknownBufferError(GraphError):
    """A task referenced a buffer id that was never registered."""


class ProgramSealedError(GraphError):
    """add_task/add_buffer called after the program was sealed."""


class DepDirection(Enum):
    """Access direction of one task/buffer dependency."""

    IN = "in"
    OUT = "out"
    INOUT = "inout"

    @property
    def reads(self) -> bool:
        return self is not DepDirection.OUT

    @property
    def writes(self) -> bool:
        return self is not DepDirection.IN


class TaskKind(Enum):
    HOST = "host"
    TARGET = "target"
    DATA_ENTER = "enter"
    DATA_EXIT = "exit"

    @property
    def is_data(self) -> bool:
        return self in (TaskKind.DATA_ENTER, TaskKind.DATA_EXIT)


@dataclass(frozen=True)
class Buffer:
    """A mapped memory region, identified by a dense integer id."""

    id: int
    size_bytes: int

    def __post_init__(self) -> None:
        if self.size_bytes < 0:
            raise GraphError(f"buffer {self.id}: negative size")


@dataclass(frozen=True)
class KernelSpec:
    """Work descriptor carried by host/target tasks.

    ``iterations`` sizes the synthetic busy loop; ``writes`` optionally
    overrides the number of bytes produced per written buffer (defaults
    to the full buffer size).  Listing a buffer in ``writes`` that the
    task does not declare as OUT/INOUT is an undeclared write and is
    reported by :func:`validate`.
    """

    iterations: int = 0
    writes: Mapping[int, int] | None = None


@dataclass(frozen=True)
class Task:
    id: int
    kind: TaskKind
    deps: tuple[tuple[int, DepDirection], ...]
    cost_estimate_us: float
    payload: KernelSpec | None = None
    release: bool = True  # DATA_EXIT only: drop all cluster copies afterwards

    def direction_of(self, buffer_id: int) -> DepDirection | None:
        for bid, d in self.deps:
            if bid == buffer_id:
                return d
        return None

    def read_buffers(self) -> tuple[int, ...]:
        return tuple(b for b, d in self.deps if d.reads)

    def written_buffers(self) -> tuple[int, ...]:
        return tuple(b for b, d in self.deps if d.writes)


@dataclass(frozen=True)
class TaskGraph:
    """A sealed program plus its derived precedence edges.

    ``edges`` is a frozenset of ``(producer, consumer, buffer)`` triples.
    ``successors``/``predecessors`` are adjacency indexes keyed by task id;
    ``pair_buffers`` maps each connected ``(u, v)`` pair to the sorted
    tuple of buffer ids whose dependencies connect them.
    """

    tasks: tuple[Task, ...]
    buffers: tuple[Buffer, ...]
    edges: frozenset[tuple[int, int, int]]
    successors: Mapping[int, tuple[int, ...]]
    predecessors: Mapping[int, tuple[int, ...]]
    pair_buffers: Mapping[tuple[int, int], tuple[int, ...]]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def task(self, task_id: int) -> Task:
        return self.tasks[task_id]

    def buffer(self, buffer_id: int) -> Buffer:
        return self.buffers[buffer_id]


class Program:
    """Mutable builder for a task program.

    Buffers and tasks are registered in serial order; :meth:`seal`
    derives the edges and freezes the result.  Construction is
    single-threaded by contract.
    """

    def __init__(self) -> None:
        self._buffers: list[Buffer] = []
        self._initial: dict[int, bytes] = {}
        self._tasks: list[Task] = []
        self._sealed: TaskGraph | None = None

    @property
    def buffers(self) -> Sequence[Buffer]:
        return tuple(self._buffers)

    @property
    def tasks(self) -> Sequence[Task]:
        return tuple(self._tasks)

    @property
    def sealed(self) -> bool:
        return self._sealed is not None

    def add_buffer(self, size_bytes: int, initial: bytes | None = None) -> int:
        if self._sealed is not None:
            raise ProgramSealedError("cannot add buffers to a sealed program")
        bid = len(self._buffers)
        self._buffers.append(Buffer(bid, size_bytes))
        if initial is not None and len(initial) != size_bytes:
            raise GraphError(f"buffer {bid}: initial content length != size")
        self._initial[bid] = initial if initial is not None else bytes(size_bytes)
        return bid

    def initial_content(self, buffer_id: int) -> bytes:
        return self._initial[buffer_id]

    def add_task(
        self,
        kind: TaskKind,
        deps: Iterable[tuple[int, DepDirection]],
        cost_estimate_us: float = 0.0,
        payload: KernelSpec | None = None,
        release: bool = True,
    ) -> int:
        if self._sealed is not None:
            raise ProgramSealedError("cannot add tasks to a sealed program")
        dep_list = tuple(deps)
        seen: set[int] = set()
        for bid, _ in dep_list:
            if not 0 <= bid < len(self._buffers):
                raise UnknownBufferError(f"task {len(self._tasks)}: unknown buffer {bid}")
            if bid in seen:
                raise GraphError(f"task {len(self._tasks)}: buffer {bid} listed twice")
            seen.add(bid)
        if kind.is_data and not dep_list:
            raise GraphError(f"{kind.value} task requires at least one buffer dependency")
        if kind is TaskKind.TARGET and cost_estimate_us <= 0:
            raise GraphError("target task requires a positive cost estimate")
        tid = len(self._tasks)
        self._tasks.append(Task(tid, kind, dep_list, float(cost_estimate_us), payload, release))
        return tid

    def seal(self) -> TaskGraph:
        """Freeze the program and derive its precedence edges (idempotent)."""
        if self._sealed is None:
            self._sealed = derive_edges(self)
        return self._sealed


def derive_edges(program: Program) -> TaskGraph:
    """Derive the precedence DAG of a program.

    Scans each buffer's touch sequence in program order, maintaining the
    most recent writer and the readers seen since it.  Any task touching
    the buffer is ordered after the current writer; a new writer is
    additionally ordered after every reader since the previous writer.
    """
    tasks = tuple(program.tasks)
    edges: set[tuple[int, int, int]] = set()
    last_writer: dict[int, int] = {}
    readers_since: dict[int, list[int]] = {}
    for task in tasks:
        for bid, direction in task.deps:
            writer = last_writer.get(bid)
            if writer is not None:
                edges.add((writer, task.id, bid))
            if direction.writes:
                for reader in readers_since.get(bid, ()):
                    edges.add((reader, task.id, bid))
                last_writer[bid] = task.id
                readers_since[bid] = []
            if direction.reads:
                readers_since.setdefault(bid, []).append(task.id)

    succ: dict[int, list[int]] = {t.id: [] for t in tasks}
    pred: dict[int, list[int]] = {t.id: [] for t in tasks}
    pair: dict[tuple[int, int], list[int]] = {}
    for u, v, b in sorted(edges):
        if v not in succ[u]:
            succ[u].append(v)
        if u not in pred[v]:
            pred[v].append(u)
        pair.setdefault((u, v), []).append(b)
    return TaskGraph(
        tasks=tasks,
        buffers=tuple(program.buffers),
        edges=frozenset(edges),
        successors={t: tuple(sorted(s)) for t, s in succ.items()},
        predecessors={t: tuple(sorted(p)) for t, p in pred.items()},
        pair_buffers={k: tuple(sorted(set(v))) for k, v in pair.items()},
    )


def validate(graph: TaskGraph) -> list[str]:
    """Check structural invariants; returns violation strings, never raises.

    Verified: edges only go forward in program order (DAG by id), edge
    endpoints really declare the edge's buffer, dep lists are well formed,
    and every buffer a kernel writes is declared OUT/INOUT by its task
    (the write-detection restriction).
    """
    violations: list[str] = []
    nbuf = len(graph.buffers)
    for u, v, b in sorted(graph.edges):
        if u >= v:
            violations.append(f"edge {u}->{v} does not increase task id")
        for endpoint in (u, v):
            if graph.tasks[endpoint].direction_of(b) is None:
                violations.append(f"edge {u}->{v} buffer {b} missing from task {endpoint} deps")
    for task in graph.tasks:
        seen: set[int] = set()
        for bid, _ in task.deps:
            if bid >= nbuf:
                violations.append(f"task {task.id}: unknown buffer {bid}")
            if bid in seen:
                violations.append(f"task {task.id}: buffer {bid} listed twice")
            seen.add(bid)
        if task.kind.is_data and not task.deps:
            violations.append(f"task {task.id}: data task with empty dep list")
        if task.kind is TaskKind.TARGET and task.cost_estimate_us <= 0:
            violations.append(f"task {task.id}: target task with non-positive cost")
        if task.payload is not None and task.payload.writes:
            declared = set(task.written_buffers())
            for bid in task.payload.writes:
                if bid not in declared:
                    violations.append(f"task {task.id}: undeclared write to buffer {bid}")
    return violations


_FORMAT_HEADER = "# taskmesh-graph v1"


def dump_graph(graph: TaskGraph) -> str:
    """Serialize a graph to the plain-text debug format.

    Layout (all fields space-separated, one record per line)::

        # taskmesh-graph v1
        buffers <B>
        <id> <size_bytes>            (B lines)
        tasks <N>
        <id> <kind> <cost_us>        (N lines, kind in host|target|enter|exit)
        deps <K>
        <task> <buffer> <dir>        (K lines, dir in in|out|inout)
        edges <E>
        <src> <dst> <buffer>         (E lines, sorted)
    """
    lines = [_FORMAT_HEADER]
    lines.append(f"buffers {len(graph.buffers)}")
    for buf in graph.buffers:
        lines.append(f"{buf.id} {buf.size_bytes}")
    lines.append(f"tasks {len(graph.tasks)}")
    for task in graph.tasks:
        lines.append(f"{task.id} {task.kind.value} {task.cost_estimate_us:.3f}")
    deps = [(t.id, b, d.value) for t in graph.tasks for b, d in t.deps]
    lines.append(f"deps {len(deps)}")
    for tid, bid, d in deps:
        lines.append(f"{tid} {bid} {d}")
    lines.append(f"edges {graph.edge_count}")
    for u, v, b in sorted(graph.edges):
        lines.append(f"{u} {v} {b}")
    return "\n".join(lines) + "\n"


def load_graph(text: str) -> TaskGraph:
    """Parse the :func:`dump_graph` format back into a TaskGraph."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    pos = 0

    def section(name: str) -> int:
        nonlocal pos
        tag, count = lines[pos].split()
        if tag != name:
            raise GraphError(f"expected section '{name}', found '{tag}'")
        pos += 1
        return int(count)

    nbuf = section("buffers")
    buffers = []
    for _ in range(nbuf):
        bid, size = lines[pos].split()
        buffers.append(Buffer(int(bid), int(size)))
        pos += 1
    ntasks = section("tasks")
    raw_tasks: list[tuple[int, TaskKind, float]] = []
    for _ in range(ntasks):
        tid, kind, cost = lines[pos].split()
        raw_tasks.append((int(tid), TaskKind(kind), float(cost)))
        pos += 1
    ndeps = section("deps")
    deps_by_task: dict[int, list[tuple[int, DepDirection]]] = {}
    for _ in range(ndeps):
        tid, bid, d = lines[pos].split()
        deps_by_task.setdefault(int(tid), []).append((int(bid), DepDirection(d)))
        pos += 1
    nedges = section("edges")
    edges = set()
    for _ in range(nedges):
        u, v, b = lines[pos].split()
        edges.add((int(u), int(v), int(b)))
        pos += 1

    program = Program()
    for buf in buffers:
        program.add_buffer(buf.size_bytes)
    for tid, kind, cost in raw_tasks:
        program.add_task(kind, deps_by_task.get(tid, []), cost if cost else (1.0 if kind is TaskKind.TARGET else 0.0))
    graph = program.seal()
    if graph.edges != frozenset(edges):
        raise GraphError("edge list does not match the re-derived edges")
    # Preserve the serialized cost estimates exactly (target cost 0 is
    # rejected by the builder, so rebuild tasks directly).
    tasks = tuple(
        Task(tid, kind, tuple(deps_by_task.get(tid, ())), cost)
        for tid, kind, cost in raw_tasks
    )
    return TaskGraph(
        tasks=tasks,
        buffers=graph.buffers,
        edges=graph.edges,
        successors=graph.successors,
        predecessors=graph.predecessors,
        pair_buffers=graph.pair_buffers,
    )


def listing_chain_program(size_bytes: int = 1024, cost_us: float = 50_000.0) -> Program:
    """The canonical enter / compute / compute / exit chain on one buffer.

    Useful as a smoke-test program: four tasks whose derived edges form a
    single chain over the shared buffer.
    """
    program = Program()
    a = program.add_buffer(size_bytes)
    program.add_task(TaskKind.DATA_ENTER, [(a, DepDirection.OUT)])
    program.add_task(TaskKind.TARGET, [(a, DepDirection.INOUT)], cost_us, KernelSpec(iterations=0))
    program.add_task(TaskKind.TARGET, [(a, DepDirection.INOUT)], cost_us, KernelSpec(iterations=0))
    program.add_task(TaskKind.DATA_EXIT, [(a, DepDirection.OUT)], release=True)
    return program
