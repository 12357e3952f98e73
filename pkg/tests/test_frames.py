"""Wire format: exact layout, round trips, chunking, stream dumping."""

import pytest

from taskmesh.frames import (
    Frame,
    FrameError,
    HEADER_LEN,
    P_ARGS,
    chunk_payload,
    decode,
    dump_stream,
    parse_chunk,
)


def test_header_is_22_bytes_little_endian():
    f = Frame(origin=3, tag=0x1122334455667788, channel=5, etype=7, payload=b"ab")
    raw = f.encode()
    assert raw[:4] == b"TMF1"
    assert raw[4] == 1  # version
    assert raw[5:7] == (3).to_bytes(2, "little")
    assert raw[7:15] == (0x1122334455667788).to_bytes(8, "little")
    assert raw[15:17] == (5).to_bytes(2, "little")
    assert raw[17] == 7
    assert raw[18:22] == (2).to_bytes(4, "little")
    assert raw[22:] == b"ab"
    assert HEADER_LEN == 22


def test_roundtrip():
    f = Frame(1, 42, 2, P_ARGS, b"hello world")
    decoded, end = decode(f.encode())
    assert decoded == f
    assert end == HEADER_LEN + 11


def test_bad_magic_rejected():
    raw = bytearray(Frame(0, 1, 1, 1, b"").encode())
    raw[0] = ord(b"X")
    with pytest.raises(FrameError):
        decode(bytes(raw))


def test_truncated_payload_rejected():
    raw = Frame(0, 1, 1, 1, b"abcdef").encode()
    with pytest.raises(FrameError):
        decode(raw[:-2])


def test_chunking_roundtrip():
    data = bytes(range(256)) * 40
    max_frame = 100 + HEADER_LEN + 8
    chunks = list(chunk_payload(data, max_frame))
    assert len(chunks) > 1
    parts = []
    for i, chunk in enumerate(chunks):
        seq, total, piece = parse_chunk(chunk)
        assert seq == i
        assert total == len(chunks)
        parts.append(piece)
    assert b"".join(parts) == data


def test_empty_payload_produces_one_chunk():
    chunks = list(chunk_payload(b""))
    assert len(chunks) == 1
    assert parse_chunk(chunks[0]) == (0, 1, b"")


def test_dump_stream():
    stream = Frame(0, 0, 0, 6, b"x").encode() + Frame(1, 9, 1, P_ARGS, b"y").encode()
    lines = dump_stream(stream)
    assert len(lines) == 2
    assert "tag=0" in lines[0]
    assert "tag=9" in lines[1] and "args" in lines[1]
