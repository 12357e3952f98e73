"""Multi-process TCP transport: a full mesh of one-way framed streams.

Every node binds a listener.  A connection carries traffic in one
direction only, from the node that opened it (which sends an IDENT
frame first) to the node that accepted it, so per-key FIFO follows from
TCP stream ordering.  Bootstrap:

1. the head binds and publishes ``host:port`` (``TASKMESH_HEAD_ADDR``);
2. each worker binds its own listener, connects to the head, and sends
   HELLO with its rank and listen address;
3. once all workers said hello, the head connects back to each worker
   and sends the full address TABLE;
4. workers connect to every other worker on receipt of the table.

Control frames (IDENT, HELLO, TABLE) use tag 0 with dedicated purpose
bytes and never reach the mailbox.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass

from ..frames import (
    Frame,
    HEADER_LEN,
    P_HELLO,
    P_IDENT,
    P_TABLE,
    decode,
)
from . import Mailbox, PeerDownError, TransportError


@dataclass
class _Peer:
    sock: socket.socket
    lock: threading.Lock


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        piece = sock.recv(n - got)
        if not piece:
            raise ConnectionError("peer closed")
        chunks.append(piece)
        got += len(piece)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> Frame:
    header = _read_exact(sock, HEADER_LEN)
    plen = int.from_bytes(header[18:22], "little")
    payload = _read_exact(sock, plen) if plen else b""
    frame, _ = decode(header + payload)
    return frame


def _connect(addr: tuple[str, int], timeout: float = 10.0) -> socket.socket:
    sock = socket.create_connection(addr, timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)
    return sock


class TcpEndpoint:
    """One node's mesh attachment; satisfies the endpoint interface the
    event layer expects (send / try_recv / mailbox)."""

    def __init__(self, node_id: int, host: str = "127.0.0.1"):
        self.node_id = node_id
        self.mailbox = Mailbox()
        self._peers: dict[int, _Peer] = {}
        self._control = Mailbox()  # HELLO/TABLE land here as notifications
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, 0))
        self._listener.listen(64)
        self.addr: tuple[str, int] = self._listener.getsockname()
        self._closed = False
        self._threads: list[threading.Thread] = []
        t = threading.Thread(target=self._accept_loop, name=f"accept-{node_id}", daemon=True)
        t.start()
        self._threads.append(t)

    # -- wiring ------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._reader, args=(sock,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, sock: socket.socket) -> None:
        try:
            ident = _read_frame(sock)
            if ident.etype != P_IDENT:
                raise TransportError("expected IDENT as first frame")
            while True:
                frame = _read_frame(sock)
                if frame.tag == 0 and frame.etype in (P_HELLO, P_TABLE):
                    self._control.deposit(frame)
                else:
                    self.mailbox.deposit(frame)
        except (ConnectionError, OSError):
            return

    def connect_to(self, peer_id: int, addr: tuple[str, int]) -> None:
        sock = _connect(addr)
        peer = _Peer(sock, threading.Lock())
        with peer.lock:
            sock.sendall(Frame(self.node_id, 0, 0, P_IDENT, b"").encode())
        self._peers[peer_id] = peer

    # -- data path -----------------------------------------------------------

    def send(self, dst: int, frame: Frame) -> None:
        peer = self._peers.get(dst)
        if peer is None:
            raise PeerDownError(f"no connection to node {dst}")
        data = frame.encode()
        try:
            with peer.lock:
                peer.sock.sendall(data)
        except OSError as exc:
            raise PeerDownError(f"send to node {dst} failed: {exc}") from exc

    def try_recv(self, key: tuple[int, int, int]) -> Frame | None:
        return self.mailbox.try_recv(key)

    def control_frame(self, timeout_s: float) -> Frame | None:
        return self._control.poll_notification(timeout_s)

    def close(self) -> None:
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        for peer in self._peers.values():
            try:
                peer.sock.close()
            except OSError:
                pass
        self.mailbox.close()
        self._control.close()


def start_head(workers: int, host: str = "127.0.0.1") -> TcpEndpoint:
    """Bind the head's endpoint; pair with :func:`await_workers`."""
    return TcpEndpoint(0, host)


def await_workers(head: TcpEndpoint, workers: int, timeout_s: float = 30.0) -> None:
    """Collect HELLOs, connect back, and broadcast the address table."""
    table: dict[int, tuple[str, int]] = {}
    while len(table) < workers:
        frame = head.control_frame(timeout_s)
        if frame is None:
            missing = set(range(1, workers + 1)) - set(table)
            raise TransportError(f"workers never connected: {sorted(missing)}")
        info = json.loads(frame.payload.decode())
        table[int(info["rank"])] = (info["host"], int(info["port"]))
    for rank, addr in sorted(table.items()):
        head.connect_to(rank, addr)
    payload = json.dumps({str(r): [h, p] for r, (h, p) in table.items()}).encode()
    for rank in sorted(table):
        head.send(rank, Frame(0, 0, 0, P_TABLE, payload))


def start_worker(rank: int, head_addr: tuple[str, int], host: str = "127.0.0.1",
                 timeout_s: float = 30.0) -> TcpEndpoint:
    """Run the worker side of the bootstrap; returns a mesh-connected endpoint."""
    ep = TcpEndpoint(rank, host)
    ep.connect_to(0, head_addr)
    hello = json.dumps({"rank": rank, "host": ep.addr[0], "port": ep.addr[1]}).encode()
    ep.send(0, Frame(rank, 0, 0, P_HELLO, hello))
    frame = ep.control_frame(timeout_s)
    if frame is None or frame.etype != P_TABLE:
        ep.close()
        raise TransportError(f"worker {rank}: no address table from head")
    table = json.loads(frame.payload.decode())
    for peer, (peer_host, peer_port) in table.items():
        if int(peer) != rank:
            ep.connect_to(int(peer), (peer_host, int(peer_port)))
    return ep
