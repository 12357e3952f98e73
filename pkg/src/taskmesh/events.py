"""Two-sided event protocol with per-event channel isolation.

Every remote action is an *event*: the origin node (usually the head)
creates the origin half, draws a fresh tag from its private counter
(tag 0 is reserved for notifications, so the first event of a run uses
tag 1), and notifies the destination on the reserved notification
channel.  The destination's gate turns the notification into a
destination half and enqueues it for the handler pool.  All subsequent
frames of the event -- arguments, payload chunks, completion or failure
-- travel on the event's own ``(origin, tag, tag % channels)`` key, so
concurrent events can never consume each other's messages.

Destination halves are non-blocking state machines: a handler calls
:meth:`DestEvent.step` which either finishes the action, reports a
failure, or yields because an expected frame has not arrived yet, in
which case the event goes to the back of the queue and is retried
later.  Kernel execution may also suspend the half until the kernel
runner reports completion.

Event types:

===============  ============================================================
ALLOC_BUFFER     reserve a buffer of a given size on the destination
DELETE_BUFFER    drop the destination's copy of a buffer
SUBMIT_DATA      push buffer content origin -> destination
RETRIEVE_DATA    pull buffer content destination -> origin
EXCHANGE_DATA    third-party forward: a send-role half makes the holder
                 push content directly to a recv-role half on another
                 worker; the head only orchestrates, it never relays
EXECUTE          run a kernel against the destination's local buffers
SYNC             no-op round trip (barrier / liveness probe)
EXIT             orderly node shutdown
===============  ============================================================
"""

from __future__ import annotations

import json
import threading
from collections import deque
from enum import Enum, IntEnum
from itertools import count
from typing import Callable

from .frames import (
    DEFAULT_MAX_FRAME,
    Frame,
    P_ARGS,
    P_COMPLETION,
    P_FAILURE,
    P_PAYLOAD,
    chunk_payload,
    parse_chunk,
)
from .kernels import KernelRunner
from .storage import BufferStore, MissingBufferError
from .trace import Tracer


class EventError(Exception):
    pass


class DeadDestinationError(EventError):
    pass


class EventFailedError(EventError):
    pass


class WaiterContractError(EventError):
    """A second thread tried to wait on an event that already has a waiter."""


class EventType(IntEnum):
    ALLOC_BUFFER = 1
    DELETE_BUFFER = 2
    SUBMIT_DATA = 3
    RETRIEVE_DATA = 4
    EXCHANGE_DATA = 5
    EXECUTE = 6
    SYNC = 7
    EXIT = 8


class EventState(Enum):
    CREATED = "created"
    NOTIFIED = "notified"
    QUEUED = "queued"
    RUNNING = "running"
    PENDING_IO = "pending_io"
    DONE = "done"
    FAILED = "failed"


class StepResult(Enum):
    DONE = "done"
    PENDING = "pending"
    KERNEL_WAIT = "kernel_wait"
    FAILED = "failed"


def encode_args(args: dict) -> bytes:
    return json.dumps(args, sort_keys=True, separators=(",", ":")).encode()


def decode_args(payload: bytes) -> dict:
    return json.loads(payload.decode())


class OriginEvent:
    """Origin half: owns the tag, stages arguments, collects the result."""

    def __init__(self, etype: EventType, origin: int, destination: int, tag: int,
                 channel: int, args: dict, payload: bytes | None = None):
        self.etype = etype
        self.origin = origin
        self.destination = destination
        self.tag = tag
        self.channel = channel
        self.args = args
        self.payload = payload
        self.state = EventState.CREATED
        self.result: bytes | None = None
        self.completion: dict | None = None
        self.error: str | None = None
        self._chunks: list[bytes] = []
        self._chunks_total: int | None = None
        self._done = threading.Event()
        self._waiter_lock = threading.Lock()
        self._waiter_active = False
        self._callbacks: list[Callable[["OriginEvent"], None]] = []

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.origin, self.tag, self.channel)

    @property
    def finished(self) -> bool:
        return self.state in (EventState.DONE, EventState.FAILED)

    def on_done(self, callback: Callable[["OriginEvent"], None]) -> None:
        """Register a completion callback (invoked once, any number allowed)."""
        with self._waiter_lock:
            if not self.finished:
                self._callbacks.append(callback)
                return
        callback(self)

    def poll(self, mailbox) -> bool:
        """Consume any frames for this event's key; True once finished."""
        while not self.finished:
            frame = mailbox.try_recv(self.key)
            if frame is None:
                break
            if frame.etype == P_PAYLOAD:
                seq, total, data = parse_chunk(frame.payload)
                self._chunks_total = total
                self._chunks.append(data)
            elif frame.etype == P_COMPLETION:
                self.completion = decode_args(frame.payload) if frame.payload else {}
                if self._chunks_total is not None:
                    self.result = b"".join(self._chunks)
                self._finish(EventState.DONE)
            elif frame.etype == P_FAILURE:
                info = decode_args(frame.payload) if frame.payload else {}
                self.error = info.get("error", "unknown failure")
                self._finish(EventState.FAILED)
        return self.finished

    def _finish(self, state: EventState) -> None:
        with self._waiter_lock:
            self.state = state
            self._done.set()
            callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)


class EventContext:
    """Origin-side operations bound to one node and one transport endpoint."""

    def __init__(self, node_id: int, endpoint, channels: int, tracer: Tracer,
                 live_nodes: Callable[[], set[int]] | None = None,
                 max_frame: int = DEFAULT_MAX_FRAME,
                 pump: Callable[[float], None] | None = None):
        self.node_id = node_id
        self.endpoint = endpoint
        self.channels = channels
        self.tracer = tracer
        self.max_frame = max_frame
        self._tags = count(1)  # tag 0 reserved for notifications
        self._lock = threading.Lock()
        self._live_nodes = live_nodes
        # pump(timeout_s) makes progress while waiting: block on the mailbox
        # for threaded transports, step the virtual clock for the simulator
        self._pump = pump if pump is not None else (lambda t: endpoint.mailbox.wait_any(t))
        self.notified = 0
        self.completed_ok = 0
        self.completed_failed = 0

    def create(self, etype: EventType, destination: int, args: dict | None = None,
               payload: bytes | None = None) -> OriginEvent:
        if destination == self.node_id:
            raise DeadDestinationError("events cannot target their own origin")
        if self._live_nodes is not None and destination not in self._live_nodes():
            raise DeadDestinationError(f"node {destination} is not live")
        with self._lock:
            tag = next(self._tags)
        ev = OriginEvent(etype, self.node_id, destination, tag, tag % self.channels,
                         dict(args or {}), payload)
        ev.on_done(self._count)
        self.tracer.event(self.node_id, tag, etype, EventState.CREATED)
        return ev

    def _count(self, ev: OriginEvent) -> None:
        with self._lock:
            if ev.state is EventState.DONE:
                self.completed_ok += 1
            else:
                self.completed_failed += 1
        self.tracer.event(self.node_id, ev.tag, ev.etype, ev.state)

    def notify(self, ev: OriginEvent) -> None:
        """Send the new-event notification, then stage args and payload."""
        if ev.state is not EventState.CREATED:
            raise EventError(f"notify on event in state {ev.state}")
        ev.state = EventState.NOTIFIED
        self.tracer.event(self.node_id, ev.tag, ev.etype, EventState.NOTIFIED)
        self.notified += 1
        note = Frame(self.node_id, 0, 0, int(ev.etype), encode_args({"tag": ev.tag}))
        self.endpoint.send(ev.destination, note)
        self.endpoint.send(
            ev.destination, Frame(self.node_id, ev.tag, ev.channel, P_ARGS, encode_args(ev.args))
        )
        if ev.payload is not None:
            for chunk in chunk_payload(ev.payload, self.max_frame):
                self.endpoint.send(
                    ev.destination, Frame(self.node_id, ev.tag, ev.channel, P_PAYLOAD, chunk)
                )

    def post(self, etype: EventType, destination: int, args: dict | None = None,
             payload: bytes | None = None) -> OriginEvent:
        ev = self.create(etype, destination, args, payload)
        self.notify(ev)
        return ev

    def wait(self, ev: OriginEvent, timeout_s: float = 30.0) -> bytes | None:
        """Block the calling thread until the event completes.

        Exactly one thread may wait at a time; waiting on an already
        finished event returns (or raises) immediately.
        """
        if not self._claim_waiter(ev):
            raise WaiterContractError(f"event tag {ev.tag} already has a waiter")
        try:
            deadline = _monotonic() + timeout_s
            while True:
                if ev.poll(self.endpoint.mailbox):
                    break
                remaining = deadline - _monotonic()
                if remaining <= 0:
                    ev.error = f"timed out after {timeout_s}s"
                    ev._finish(EventState.FAILED)
                    break
                self._pump(min(remaining, 0.05))
        finally:
            self._release_waiter(ev)
        return self._conclude(ev)

    def _claim_waiter(self, ev: OriginEvent) -> bool:
        with ev._waiter_lock:
            if ev.finished:
                return True
            if ev._waiter_active:
                return False
            ev._waiter_active = True
            return True

    def _release_waiter(self, ev: OriginEvent) -> None:
        with ev._waiter_lock:
            ev._waiter_active = False

    def _conclude(self, ev: OriginEvent) -> bytes | None:
        # completion itself is traced by _count at finish time
        self.endpoint.mailbox.drop_key(ev.key)
        if ev.state is EventState.FAILED:
            raise EventFailedError(ev.error or "event failed")
        return ev.result


def _monotonic() -> float:
    import time

    return time.monotonic()


class DestEvent:
    """Destination half: a resumable state machine executed by handlers."""

    def __init__(self, etype: EventType, origin: int, tag: int, channel: int):
        self.etype = etype
        self.origin = origin
        self.tag = tag
        self.channel = channel
        self.args: dict | None = None
        self.state = EventState.QUEUED
        self.requeues = 0
        self._chunks: list[bytes] = []
        self._chunks_total: int | None = None
        self._kernel: tuple | None = None  # None -> not started; ("wait",) ; ("done", outputs, elapsed)
        self.advanced = False

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.origin, self.tag, self.channel)

    # -- helpers -------------------------------------------------------------

    def _recv_args(self, node: "NodeCore") -> bool:
        if self.args is not None:
            return True
        frame = node.endpoint.try_recv(self.key)
        if frame is None:
            return False
        if frame.etype != P_ARGS:
            raise EventError(f"expected args frame, got etype {frame.etype}")
        self.args = decode_args(frame.payload)
        self.advanced = True
        return True

    def _recv_payload(self, node: "NodeCore", key: tuple[int, int, int] | None = None) -> bytes | None:
        """Accumulate payload chunks; None until the last chunk arrived."""
        key = key or self.key
        while self._chunks_total is None or len(self._chunks) < self._chunks_total:
            frame = node.endpoint.try_recv(key)
            if frame is None:
                return None
            if frame.etype != P_PAYLOAD:
                raise EventError(f"expected payload frame, got etype {frame.etype}")
            seq, total, data = parse_chunk(frame.payload)
            self._chunks_total = total
            self._chunks.append(data)
            self.advanced = True
        return b"".join(self._chunks)

    def _send_payload(self, node: "NodeCore", dst_node: int, key: tuple[int, int, int], data: bytes) -> None:
        for chunk in chunk_payload(data, node.max_frame):
            node.send(dst_node, Frame(key[0], key[1], key[2], P_PAYLOAD, chunk))

    def _complete(self, node: "NodeCore", extra: dict | None = None) -> StepResult:
        payload = encode_args({"status": "ok", **(extra or {})})
        node.send(self.origin, Frame(self.origin, self.tag, self.channel, P_COMPLETION, payload))
        self.state = EventState.DONE
        node.tracer.event(node.node_id, self.tag, self.etype, EventState.DONE)
        node.endpoint.mailbox.drop_key(self.key)
        node.completed += 1
        return StepResult.DONE

    def _fail(self, node: "NodeCore", message: str) -> StepResult:
        payload = encode_args({"status": "error", "error": message})
        node.send(self.origin, Frame(self.origin, self.tag, self.channel, P_FAILURE, payload))
        self.state = EventState.FAILED
        node.tracer.event(node.node_id, self.tag, self.etype, EventState.FAILED)
        node.endpoint.mailbox.drop_key(self.key)
        return StepResult.FAILED

    # -- the action ------------------------------------------------------------

    def step(self, node: "NodeCore") -> StepResult:
        self.advanced = False
        self.state = EventState.RUNNING
        try:
            return self._dispatch(node)
        except MissingBufferError as exc:
            return self._fail(node, f"missing buffer: {exc}")
        except EventError as exc:
            return self._fail(node, str(exc))

    def _dispatch(self, node: "NodeCore") -> StepResult:
        if self.etype is EventType.EXIT:
            node.stopping = True
            return self._complete(node)
        if not self._recv_args(node):
            return self._pending(node)
        args = self.args

        if self.etype is EventType.SYNC:
            return self._complete(node)

        if self.etype is EventType.ALLOC_BUFFER:
            node.store.alloc(args["buffer"], args["size"])
            return self._complete(node)

        if self.etype is EventType.DELETE_BUFFER:
            node.store.delete(args["buffer"])
            return self._complete(node)

        if self.etype is EventType.SUBMIT_DATA:
            data = self._recv_payload(node)
            if data is None:
                return self._pending(node)
            node.store.write(args["buffer"], data)
            return self._complete(node)

        if self.etype is EventType.RETRIEVE_DATA:
            data = node.store.read(args["buffer"])
            self._send_payload(node, self.origin, self.key, data)
            return self._complete(node)

        if self.etype is EventType.EXCHANGE_DATA:
            if args["role"] == "send":
                data = node.store.read(args["buffer"])
                peer_key = (self.origin, args["peer_tag"], args["peer_channel"])
                self._send_payload(node, args["peer"], peer_key, data)
                return self._complete(node)
            data = self._recv_payload(node)
            if data is None:
                return self._pending(node)
            node.store.write(args["buffer"], data)
            return self._complete(node)

        if self.etype is EventType.EXECUTE:
            return self._execute(node)

        return self._fail(node, f"unhandled event type {self.etype}")

    def _execute(self, node: "NodeCore") -> StepResult:
        args = self.args
        if self._kernel is None:
            inputs = [(b, node.store.read(b)) for b in args["reads"]]
            started = node.kernel.begin(
                task_id=args["task"],
                iterations=args["iterations"],
                inputs=inputs,
                writes=[(b, size) for b, size in args["writes"]],
                on_done=lambda outputs, elapsed: node.kernel_finished(self, outputs, elapsed),
            )
            if started is None:
                self._kernel = ("wait",)
                return StepResult.KERNEL_WAIT
            self._kernel = ("done", *started)
        if self._kernel[0] == "wait":
            return StepResult.KERNEL_WAIT
        _, outputs, elapsed = self._kernel
        for bid, data in outputs:
            node.store.write(bid, data)
        return self._complete(node, {"elapsed_us": elapsed})

    def _pending(self, node: "NodeCore") -> StepResult:
        self.state = EventState.PENDING_IO
        self.requeues += 1
        node.tracer.event(node.node_id, self.tag, self.etype, EventState.PENDING_IO)
        return StepResult.PENDING


class NodeCore:
    """Per-node protocol state shared by the threaded and simulated drivers:
    the gate logic, the destination-event queue, and the local store."""

    def __init__(self, node_id: int, endpoint, store: BufferStore, kernel: KernelRunner,
                 tracer: Tracer, channels: int, max_frame: int = DEFAULT_MAX_FRAME):
        self.node_id = node_id
        self.endpoint = endpoint
        self.store = store
        self.kernel = kernel
        self.tracer = tracer
        self.channels = channels
        self.max_frame = max_frame
        self.queue: deque[DestEvent] = deque()
        self.stopping = False
        self.completed = 0
        self.queued = 0
        self.enqueue: Callable[[DestEvent], None] = self.queue.append
        self.on_kernel_done: Callable[[DestEvent], None] | None = None

    def send(self, dst: int, frame: Frame) -> None:
        self.endpoint.send(dst, frame)

    def handle_notification(self, frame: Frame) -> DestEvent:
        """Gate logic: turn a notification into a queued destination half."""
        info = decode_args(frame.payload)
        tag = info["tag"]
        ev = DestEvent(EventType(frame.etype), frame.origin, tag, tag % self.channels)
        self.tracer.event(self.node_id, tag, ev.etype, EventState.QUEUED)
        self.queued += 1
        self.enqueue(ev)
        return ev

    def step(self, ev: DestEvent) -> StepResult:
        self.tracer.event(self.node_id, ev.tag, ev.etype, EventState.RUNNING)
        return ev.step(self)

    def kernel_finished(self, ev: DestEvent, outputs, elapsed) -> None:
        """Kernel-runner callback: resume the suspended EXECUTE half."""
        ev._kernel = ("done", outputs, elapsed)
        if self.on_kernel_done is not None:
            self.on_kernel_done(ev)
