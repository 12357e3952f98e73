"""Buffer location directory and transfer planning.

The head node owns one :class:`DataManager` per run.  For every buffer
it tracks the set of nodes holding a current copy and which node holds
the freshest one, and turns task boundaries into ordered
:class:`TransferPlan` actions:

* enter-data sends the buffer straight to the node of the
  earliest-scheduled task that uses it;
* before a task runs, every dependency buffer missing from its node is
  forwarded from the freshest location -- worker to worker directly,
  never relayed through the head;
* after a task that writes a buffer, every other copy is invalidated so
  exactly one location remains; read-only buffers keep all copies;
* exit-data retrieves the freshest copy back to the head and optionally
  removes the buffer from the whole cluster.

Plans are applied atomically at task boundaries; all mutations are
serialised through the owning orchestrator.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .graph import Task, TaskGraph, TaskKind
from .scheduler import Schedule

HEAD = 0


class UnregisteredBufferError(Exception):
    pass


class ActionKind(Enum):
    ALLOC = "alloc"
    FORWARD = "forward"
    RETRIEVE = "retrieve"
    REMOVE = "remove"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    buffer: int
    src: int
    dst: int

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.buffer}:{self.src}->{self.dst}"


TransferPlan = list[Action]


@dataclass
class BufferState:
    locations: set[int]
    fresh: int
    registered: bool = True

    @property
    def on_head(self) -> bool:
        return HEAD in self.locations


class DataManager:
    def __init__(self, graph: TaskGraph, schedule: Schedule):
        self._graph = graph
        self._schedule = schedule
        # every program buffer starts registered with the head holding
        # the only (initial) copy
        self._state: dict[int, BufferState] = {
            b.id: BufferState(locations={HEAD}, fresh=HEAD) for b in graph.buffers
        }

    def state(self, buffer_id: int) -> BufferState:
        return self._state[buffer_id]

    def _first_user_node(self, buffer_id: int) -> int | None:
        """Node of the earliest-scheduled non-data task using the buffer."""
        users = [
            t.id
            for t in self._graph.tasks
            if not t.kind.is_data and t.direction_of(buffer_id) is not None
        ]
        if not users:
            return None
        first = min(users, key=lambda tid: (self._schedule.est[tid], tid))
        return self._schedule.assignment[first]

    def on_enter_data(self, buffer_id: int) -> TransferPlan:
        st = self._state[buffer_id]
        node = self._first_user_node(buffer_id)
        if node is None or node == HEAD:
            # unused (or head-only) buffer: keep the head registration
            st.locations = {HEAD}
            st.fresh = HEAD
            return [Action(ActionKind.ALLOC, buffer_id, HEAD, HEAD)]
        st.locations = {node}
        st.fresh = node
        return [
            Action(ActionKind.ALLOC, buffer_id, node, node),
            Action(ActionKind.FORWARD, buffer_id, HEAD, node),
        ]

    def before_execute(self, task: Task, node: int) -> TransferPlan:
        plan: TransferPlan = []
        for bid, _ in task.deps:
            st = self._state[bid]
            if node not in st.locations:
                plan.append(Action(ActionKind.FORWARD, bid, st.fresh, node))
                st.locations.add(node)
        return plan

    def after_execute(self, task: Task, node: int) -> TransferPlan:
        plan: TransferPlan = []
        for bid, direction in task.deps:
            st = self._state[bid]
            if direction.writes:
                for other in sorted(st.locations - {node}):
                    if other != HEAD:
                        plan.append(Action(ActionKind.REMOVE, bid, other, other))
                st.locations = {node}
                st.fresh = node
            else:
                st.locations.add(node)
        return plan

    def on_exit_data(self, buffer_id: int, release: bool) -> TransferPlan:
        st = self._state.get(buffer_id)
        if st is None or not st.registered:
            raise UnregisteredBufferError(f"buffer {buffer_id} is not registered")
        plan: TransferPlan = []
        if st.fresh != HEAD:
            plan.append(Action(ActionKind.RETRIEVE, buffer_id, st.fresh, HEAD))
        st.locations.add(HEAD)
        st.fresh = HEAD
        if release:
            for other in sorted(st.locations - {HEAD}):
                plan.append(Action(ActionKind.REMOVE, buffer_id, other, other))
            st.locations = set()
            st.registered = False
        return plan
