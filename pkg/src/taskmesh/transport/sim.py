"""Deterministic in-process transport with a discrete-event virtual clock.

All "nodes" live in one process.  Sends are serialised through the
sending node's egress (per-frame overhead plus payload transfer time)
and arrive one latency later, so frames between any node pair keep
their send order and the whole run is a pure function of (program,
config, seed).  The clock only moves when :meth:`SimNet.step` executes
the next scheduled entry; ties are broken by insertion order.
"""

from __future__ import annotations

import heapq
from itertools import count
from typing import Callable

from ..frames import Frame
from . import Mailbox, NetModel, PeerDownError


class SimNet:
    def __init__(self, model: NetModel):
        self.model = model
        self.now_us = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = count()
        self._egress_free: dict[int, int] = {}
        self._endpoints: dict[int, "SimEndpoint"] = {}
        self._dead: set[int] = set()

    # -- wiring ------------------------------------------------------------

    def endpoint(self, node_id: int) -> "SimEndpoint":
        ep = SimEndpoint(node_id, self)
        self._endpoints[node_id] = ep
        return ep

    def kill(self, node_id: int) -> None:
        """Fault injection: the node stops receiving frames."""
        self._dead.add(node_id)

    # -- scheduling --------------------------------------------------------

    def schedule_at(self, when_us: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(when_us, self.now_us), next(self._seq), fn))

    def schedule_after(self, delay_us: int, fn: Callable[[], None]) -> None:
        self.schedule_at(self.now_us + delay_us, fn)

    def advance_to(self, when_us: int) -> None:
        if when_us > self.now_us:
            self.now_us = when_us

    @property
    def idle(self) -> bool:
        return not self._heap

    def step(self) -> bool:
        """Run the next scheduled entry; False when nothing is pending."""
        if not self._heap:
            return False
        when, _, fn = heapq.heappop(self._heap)
        self.now_us = when
        fn()
        return True

    def run(self, max_steps: int | None = None) -> int:
        steps = 0
        while self.step():
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        return steps

    # -- frame motion --------------------------------------------------------

    def send(self, src: int, dst: int, frame: Frame) -> None:
        if dst not in self._endpoints:
            raise PeerDownError(f"node {dst} does not exist")
        occupancy = self.model.frame_overhead_us + self.model.transfer_us(len(frame.payload))
        start = max(self.now_us, self._egress_free.get(src, 0))
        self._egress_free[src] = start + occupancy
        arrival = start + occupancy + self.model.latency_us
        if dst in self._dead:
            return  # dropped silently; waiters time out
        self.schedule_at(arrival, lambda: self._deliver(dst, frame))

    def _deliver(self, dst: int, frame: Frame) -> None:
        ep = self._endpoints.get(dst)
        if ep is None or dst in self._dead:
            return
        ep.mailbox.deposit(frame)
        if ep.on_deliver is not None:
            ep.on_deliver()


class SimEndpoint:
    """One node's attachment point; non-blocking accessors only."""

    def __init__(self, node_id: int, net: SimNet):
        self.node_id = node_id
        self.net = net
        self.mailbox = Mailbox()
        self.on_deliver: Callable[[], None] | None = None
        self._capture: list[bytes] | None = None

    def send(self, dst: int, frame: Frame) -> None:
        if self._capture is not None:
            self._capture.append(frame.encode())
        self.net.send(self.node_id, dst, frame)

    def try_recv(self, key: tuple[int, int, int]) -> Frame | None:
        return self.mailbox.try_recv(key)

    def poll_notification(self) -> Frame | None:
        return self.mailbox.poll_notification(0.0)

    def start_capture(self) -> list[bytes]:
        self._capture = []
        return self._capture

    def close(self) -> None:
        self.mailbox.close()
