"""Execution drivers for node protocol state.

Two drivers share :class:`~taskmesh.events.NodeCore`:

* :class:`ThreadedWorkerNode` -- a real node: one gate thread receiving
  notifications, a pool of handler threads consuming the event queue
  (re-enqueueing halves that yield on pending I/O), kernels spun inline
  on the handling thread so the pool size bounds kernel concurrency.

* :class:`SimWorld` -- every node in one process under a discrete-event
  virtual clock.  Frame deliveries trigger a drain of the receiving
  node: gate logic runs immediately, then the queue is rotated until no
  half makes progress.  Kernels occupy one of the node's virtual
  handler slots for their modelled duration instead of spinning.
"""

from __future__ import annotations

import queue
import threading
import time
from collections import deque
from math import ceil

from .events import (
    DestEvent,
    EventContext,
    EventType,
    NodeCore,
    OriginEvent,
    StepResult,
)
from .frames import DEFAULT_MAX_FRAME
from .kernels import (
    SIM_ITERATIONS_PER_US,
    InlineKernelRunner,
    run_transform,
)
from .storage import BufferStore
from .trace import Tracer
from .transport import NetModel
from .transport.sim import SimNet

_POISON = object()


class ThreadedWorkerNode:
    """Gate thread plus handler pool around a NodeCore (real transports)."""

    def __init__(self, core: NodeCore, handlers: int | None = None):
        self.core = core
        self.handlers = handlers or _default_pool()
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        core.enqueue = self._queue.put
        self._threads: list[threading.Thread] = []
        self._gate_thread: threading.Thread | None = None

    def start(self) -> None:
        self._gate_thread = threading.Thread(target=self._gate, name=f"gate-{self.core.node_id}", daemon=True)
        self._gate_thread.start()
        for i in range(self.handlers):
            t = threading.Thread(target=self._handler, name=f"handler-{self.core.node_id}-{i}", daemon=True)
            t.start()
            self._threads.append(t)

    def _gate(self) -> None:
        while True:
            frame = self.core.endpoint.mailbox.poll_notification(0.05)
            if frame is None:
                if self.core.endpoint.mailbox.closed:
                    break
                continue
            ev = self.core.handle_notification(frame)
            if ev.etype is EventType.EXIT:
                break

    def _handler(self) -> None:
        while True:
            item = self._queue.get()
            if item is _POISON:
                break
            result = self.core.step(item)
            if result is StepResult.PENDING:
                if not item.advanced:
                    time.sleep(1e-4)  # bounded back-off, not a busy spin
                self._queue.put(item)
            elif result is StepResult.DONE and item.etype is EventType.EXIT:
                for _ in range(self.handlers):
                    self._queue.put(_POISON)

    def join(self, timeout: float | None = None) -> None:
        if self._gate_thread is not None:
            self._gate_thread.join(timeout)
        for t in self._threads:
            t.join(timeout)

    def run(self) -> None:
        """Start, then block until the node shuts down via an EXIT event."""
        self.start()
        self.join()
        self.core.endpoint.close()


def _default_pool() -> int:
    import os

    # leave room for the gate and the orchestrating thread
    return max(1, (os.cpu_count() or 4) - 2)


class _VirtualKernelRunner:
    """Charges kernel durations to the virtual clock, bounded by slots."""

    def __init__(self, net: SimNet, slots: int, rate_ipus: float):
        self.net = net
        self.slots = slots
        self.rate_ipus = rate_ipus
        self.busy = 0
        self.backlog: deque = deque()
        self.busy_us = 0

    def begin(self, task_id, iterations, inputs, writes, on_done):
        outputs = run_transform(task_id, iterations, inputs, writes)
        duration = ceil(iterations / self.rate_ipus)
        job = (outputs, duration, on_done)
        if self.busy < self.slots:
            self._start(job)
        else:
            self.backlog.append(job)
        return None

    def _start(self, job) -> None:
        self.busy += 1
        self.net.schedule_after(job[1], lambda: self._finish(job))

    def _finish(self, job) -> None:
        self.busy -= 1
        self.busy_us += job[1]
        if self.backlog:
            self._start(self.backlog.popleft())
        job[2](job[0], job[1])


class _SimNodeState:
    __slots__ = ("core", "runner", "origin_events")

    def __init__(self, core: NodeCore, runner: _VirtualKernelRunner):
        self.core = core
        self.runner = runner
        self.origin_events: list[OriginEvent] = []


class SimWorld:
    """All nodes of a run inside one process under virtual time."""

    def __init__(self, workers: int, channels: int = 8, handler_slots: int = 1,
                 model: NetModel | None = None, rate_ipus: float = SIM_ITERATIONS_PER_US,
                 max_frame: int = DEFAULT_MAX_FRAME, tracer: Tracer | None = None):
        self.net = SimNet(model or NetModel())
        self.tracer = tracer or Tracer(lambda: self.net.now_us)
        if tracer is not None:
            tracer._clock = lambda: self.net.now_us
        self.workers = workers
        self.channels = channels
        self.nodes: dict[int, _SimNodeState] = {}
        for node_id in range(workers + 1):
            endpoint = self.net.endpoint(node_id)
            runner = _VirtualKernelRunner(self.net, handler_slots, rate_ipus)
            core = NodeCore(node_id, endpoint, BufferStore(), runner, self.tracer,
                            channels, max_frame)
            state = _SimNodeState(core, runner)
            core.on_kernel_done = lambda ev, nid=node_id: self._kernel_resume(nid, ev)
            endpoint.on_deliver = lambda nid=node_id: self.drain(nid)
            self.nodes[node_id] = state

    # -- origin-side helpers ---------------------------------------------------

    def context(self, node_id: int = 0) -> EventContext:
        state = self.nodes[node_id]
        ctx = EventContext(
            node_id, state.core.endpoint, self.channels, self.tracer,
            live_nodes=lambda: set(self.nodes) - self.net._dead,
            max_frame=state.core.max_frame,
            pump=lambda _t: self._pump(),
        )
        original_notify = ctx.notify

        def tracked_notify(ev: OriginEvent) -> None:
            original_notify(ev)
            state.origin_events.append(ev)

        ctx.notify = tracked_notify  # type: ignore[method-assign]
        return ctx

    def _pump(self) -> None:
        if not self.net.step():
            # nothing in flight: virtual deadlock, let the waiter time out
            time.sleep(0)
            raise _IdleWorld()

    def _kernel_resume(self, node_id: int, ev: DestEvent) -> None:
        self.nodes[node_id].core.queue.append(ev)
        self.drain(node_id)

    # -- the drain loop ----------------------------------------------------------

    def drain(self, node_id: int) -> None:
        state = self.nodes[node_id]
        core = state.core
        progress = True
        while progress:
            progress = False
            while True:
                frame = core.endpoint.poll_notification()
                if frame is None:
                    break
                core.handle_notification(frame)
                progress = True
            for _ in range(len(core.queue)):
                ev = core.queue.popleft()
                result = core.step(ev)
                if result is StepResult.PENDING:
                    core.queue.append(ev)
                    if ev.advanced:
                        progress = True
                elif result is StepResult.KERNEL_WAIT:
                    pass  # resumed by the runner callback
                else:
                    progress = True
        if state.origin_events:
            still = []
            for ev in state.origin_events:
                if not ev.finished:
                    ev.poll(core.endpoint.mailbox)
                if not ev.finished:
                    still.append(ev)
                else:
                    core.endpoint.mailbox.drop_key(ev.key)
            state.origin_events = still

    # -- driving -----------------------------------------------------------------

    def step(self) -> bool:
        return self.net.step()

    def run_until(self, predicate, max_steps: int = 50_000_000) -> bool:
        steps = 0
        while not predicate():
            if not self.net.step():
                return False
            steps += 1
            if steps >= max_steps:
                raise RuntimeError("simulation exceeded step budget")
        return True

    def run_all(self) -> None:
        while self.net.step():
            pass

    def wait(self, ctx: EventContext, ev: OriginEvent, timeout_virtual_us: int = 10_000_000) -> bytes | None:
        """Drive the clock until the event completes (or nothing is left)."""
        try:
            return ctx.wait(ev, timeout_s=3600.0)
        except _IdleWorld:
            self.net.advance_to(self.net.now_us + timeout_virtual_us)
            from .events import EventFailedError, EventState

            ev.error = "destination unreachable (virtual timeout)"
            ev._finish(EventState.FAILED)
            raise EventFailedError(ev.error)


class _IdleWorld(Exception):
    """The virtual clock has nothing left to run."""
