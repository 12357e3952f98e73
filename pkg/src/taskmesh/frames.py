"""Bit-exact wire format shared by every transport.

Frame layout, all integers little-endian, in this order::

    magic       4 bytes   b"TMF1"
    version     u8        1
    origin      u16       node id owning the tag namespace
    tag         u64       0 is reserved for notifications / control
    channel     u16       tag % channel_count (0 for tag 0)
    etype       u8        event type (notifications) or frame purpose
    payload_len u32       length of the payload that follows
    payload     bytes

The matching key of a frame is ``(origin, tag, channel)``.  The
``origin`` field always names the node that created the event (the
owner of the tag namespace), regardless of which node sends a given
frame, so both sides of an event match on the same key.

etype values 1..15 are event types and only appear in notification
frames (tag 0); 16..31 are in-event frame purposes; 32..47 are
transport control frames used during connection setup.

Payloads larger than ``max_frame_payload`` are split into chunks, each
carrying an 8-byte ``(seq:u32, total:u32)`` header inside the payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

MAGIC = b"TMF1"
VERSION = 1
HEADER = struct.Struct("<4sBHQHBI")
HEADER_LEN = HEADER.size  # 22 bytes

DEFAULT_MAX_FRAME = 64 * 1024 * 1024  # total frame size cap
CHUNK_HEADER = struct.Struct("<II")

# frame purposes (etype byte outside notifications)
P_ARGS = 16
P_PAYLOAD = 17
P_COMPLETION = 18
P_FAILURE = 19
# transport control
P_HELLO = 32
P_TABLE = 33
P_IDENT = 34

_PURPOSE_NAMES = {
    P_ARGS: "args",
    P_PAYLOAD: "payload",
    P_COMPLETION: "completion",
    P_FAILURE: "failure",
    P_HELLO: "hello",
    P_TABLE: "table",
    P_IDENT: "ident",
}


class FrameError(Exception):
    pass


@dataclass(frozen=True)
class Frame:
    origin: int
    tag: int
    channel: int
    etype: int
    payload: bytes = b""

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.origin, self.tag, self.channel)

    def encode(self) -> bytes:
        return (
            HEADER.pack(
                MAGIC, VERSION, self.origin, self.tag, self.channel, self.etype, len(self.payload)
            )
            + self.payload
        )


def decode(data: bytes, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame at `offset`; returns (frame, next_offset)."""
    if len(data) - offset < HEADER_LEN:
        raise FrameError("truncated header")
    magic, version, origin, tag, channel, etype, plen = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    end = offset + HEADER_LEN + plen
    if len(data) < end:
        raise FrameError("truncated payload")
    return Frame(origin, tag, channel, etype, bytes(data[offset + HEADER_LEN : end])), end


def chunk_payload(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Iterator[bytes]:
    """Split `data` into chunk payloads, each prefixed (seq, total)."""
    room = max_frame - HEADER_LEN - CHUNK_HEADER.size
    if room <= 0:
        raise FrameError("max frame too small for chunking")
    total = max(1, -(-len(data) // room))
    for seq in range(total):
        piece = data[seq * room : (seq + 1) * room]
        yield CHUNK_HEADER.pack(seq, total) + piece


def parse_chunk(payload: bytes) -> tuple[int, int, bytes]:
    seq, total = CHUNK_HEADER.unpack_from(payload)
    return seq, total, payload[CHUNK_HEADER.size :]


def describe(frame: Frame) -> str:
    """One-line human rendering, used by the tmf-dump subcommand."""
    if frame.tag == 0:
        kind = _PURPOSE_NAMES.get(frame.etype, f"notify/{frame.etype}")
    else:
        kind = _PURPOSE_NAMES.get(frame.etype, f"etype={frame.etype}")
    head = frame.payload[:16].hex()
    if len(frame.payload) > 16:
        head += "..."
    return (
        f"origin={frame.origin} tag={frame.tag} channel={frame.channel} "
        f"{kind} len={len(frame.payload)} payload={head}"
    )


def dump_stream(data: bytes) -> list[str]:
    """Decode a concatenated-frame capture into description lines."""
    lines = []
    offset = 0
    while offset < len(data):
        frame, offset = decode(data, offset)
        lines.append(describe(frame))
    return lines
