"""Message transports beneath the event system.

Both implementations (in-process virtual-time simulator, multi-process
TCP mesh) expose the same semantics: ``send`` delivers a frame exactly
once to the destination node, frames with the same matching key arrive
in send order, and receivers only ever observe frames whose
``(origin, tag, channel)`` key they asked for.  Notification frames
(tag 0) land in a dedicated queue consumed by the gate loop.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

from ..frames import Frame


class TransportError(Exception):
    pass


class PeerDownError(TransportError):
    pass


class MatchTimeout(TransportError):
    pass


@dataclass(frozen=True)
class NetModel:
    """Latency/bandwidth delivery model used by the simulator.

    A frame sent on an idle link is delivered after
    ``latency_us + payload_len / bandwidth_bpus``.  ``frame_overhead_us``
    additionally charges the sender a fixed per-frame software cost, and
    each node's egress serialises its outgoing transfers, which models a
    single NIC and a dispatch-rate-limited sender.
    """

    latency_us: int = 5
    bandwidth_bpus: float = 1.0
    frame_overhead_us: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.latency_us < 0 or self.frame_overhead_us < 0:
            raise ValueError("latency and frame overhead must be >= 0")
        if self.bandwidth_bpus <= 0:
            raise ValueError("bandwidth must be positive")

    def transfer_us(self, nbytes: int) -> int:
        if nbytes == 0:
            return 0
        exact = nbytes / self.bandwidth_bpus
        whole = int(exact)
        return whole if whole == exact else whole + 1

    def delivery_us(self, nbytes: int) -> int:
        return self.latency_us + self.transfer_us(nbytes)


class Mailbox:
    """Per-node inbox: keyed frame queues plus the notification queue.

    Thread-safe; the simulator uses it single-threaded with the
    non-blocking accessors only.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)
        self._frames: dict[tuple[int, int, int], deque[Frame]] = {}
        self._notifications: deque[Frame] = deque()
        self.closed = False

    def deposit(self, frame: Frame) -> None:
        with self._cv:
            if frame.tag == 0:
                self._notifications.append(frame)
            else:
                self._frames.setdefault(frame.key, deque()).append(frame)
            self._cv.notify_all()

    def try_recv(self, key: tuple[int, int, int]) -> Frame | None:
        with self._lock:
            q = self._frames.get(key)
            if not q:
                return None
            return q.popleft()

    def recv_match(self, key: tuple[int, int, int], timeout_s: float) -> Frame:
        deadline = _monotonic() + timeout_s
        with self._cv:
            while True:
                q = self._frames.get(key)
                if q:
                    return q.popleft()
                remaining = deadline - _monotonic()
                if remaining <= 0 or self.closed:
                    raise MatchTimeout(f"no frame for key {key}")
                self._cv.wait(remaining)

    def wait_any(self, timeout_s: float) -> None:
        """Block until any deposit happens (or timeout); used by pollers."""
        with self._cv:
            self._cv.wait(timeout_s)

    def poll_notification(self, timeout_s: float = 0.0) -> Frame | None:
        deadline = _monotonic() + timeout_s
        with self._cv:
            while True:
                if self._notifications:
                    return self._notifications.popleft()
                remaining = deadline - _monotonic()
                if remaining <= 0 or self.closed:
                    return None
                self._cv.wait(remaining)

    def drop_key(self, key: tuple[int, int, int]) -> None:
        with self._lock:
            self._frames.pop(key, None)

    def pending_keys(self) -> list[tuple[int, int, int]]:
        with self._lock:
            return [k for k, q in self._frames.items() if q]

    def close(self) -> None:
        with self._cv:
            self.closed = True
            self._cv.notify_all()


def _monotonic() -> float:
    import time

    return time.monotonic()
