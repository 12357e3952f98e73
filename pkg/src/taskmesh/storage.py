"""Per-node buffer store: a thread-safe map of buffer id to content."""

from __future__ import annotations

import threading


class MissingBufferError(Exception):
    pass


class BufferStore:
    def __init__(self) -> None:
        self._bufs: dict[int, bytes] = {}
        self._lock = threading.RLock()

    def alloc(self, buffer_id: int, size: int) -> None:
        with self._lock:
            if buffer_id not in self._bufs:
                self._bufs[buffer_id] = bytes(size)

    def write(self, buffer_id: int, data: bytes) -> None:
        with self._lock:
            self._bufs[buffer_id] = bytes(data)

    def read(self, buffer_id: int) -> bytes:
        with self._lock:
            try:
                return self._bufs[buffer_id]
            except KeyError:
                raise MissingBufferError(str(buffer_id)) from None

    def delete(self, buffer_id: int) -> None:
        with self._lock:
            if self._bufs.pop(buffer_id, None) is None:
                raise MissingBufferError(str(buffer_id))

    def has(self, buffer_id: int) -> bool:
        with self._lock:
            return buffer_id in self._bufs

    def snapshot(self) -> dict[int, bytes]:
        with self._lock:
            return dict(self._bufs)
