"""Framed wire protocol for the scoring service.

Frame = u32 little-endian body length, then the body. Body layout:

    u32 payload_area_len | payload sections ... | header (UTF-8 JSON)

Binary feature payloads sit ahead of the text header so their spans are
absolute body offsets known before the header is serialized; the header
references them as {"offset": o, "length": n}. Fixed header field names:
``kind``, ``request_id``, ``query_tokens``, ``items``, ``flags``.
"""

from __future__ import annotations

import json
import socket
import struct

from .errors import DecodeError

MAX_FRAME = 64 * 1024 * 1024


def pack_body(header: dict, payloads: list[bytes] | None = None) -> bytes:
    payloads = payloads or []
    area = b"".join(payloads)
    return (struct.pack("<I", len(area)) + area +
            json.dumps(header, sort_keys=True).encode("utf-8"))


def payload_spans(payloads: list[bytes]) -> list[dict]:
    """Body-absolute {offset, length} for each section, in order."""
    spans = []
    offset = 4
    for blob in payloads:
        spans.append({"offset": offset, "length": len(blob)})
        offset += len(blob)
    return spans


def parse_body(body: bytes) -> dict:
    if len(body) < 4:
        raise DecodeError("frame body shorter than payload-area header", field="payload_area")
    (area_len,) = struct.unpack("<I", body[:4])
    if 4 + area_len > len(body):
        raise DecodeError("payload area extends past frame", field="payload_area")
    try:
        header = json.loads(body[4 + area_len:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"header is not valid JSON: {exc}", field="header") from exc
    if not isinstance(header, dict) or "kind" not in header:
        raise DecodeError("header must be an object with a 'kind'", field="kind")
    return header


def extract_section(body: bytes, span: dict) -> bytes:
    try:
        offset, length = int(span["offset"]), int(span["length"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError("payload reference needs integer offset/length",
                          field="offset") from exc
    (area_len,) = struct.unpack("<I", body[:4])
    if offset < 4 or length < 0 or offset + length > 4 + area_len:
        raise DecodeError(f"payload span [{offset}, {offset + length}) outside "
                          f"payload area", field="offset")
    return body[offset:offset + length]


def send_frame(sock: socket.socket, body: bytes) -> None:
    if len(body) > MAX_FRAME:
        raise ValueError(f"frame of {len(body)} exceeds limit {MAX_FRAME}")
    sock.sendall(struct.pack("<I", len(body)) + body)


def recv_frame(sock: socket.socket) -> bytes | None:
    """Read one frame; None on clean EOF before a new frame starts."""
    head = _recv_exact(sock, 4, allow_eof=True)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length > MAX_FRAME:
        raise DecodeError(f"frame length {length} exceeds limit", field="length")
    body = _recv_exact(sock, length, allow_eof=False)
    return body


def _recv_exact(sock: socket.socket, n: int, allow_eof: bool) -> bytes | None:
    chunks = []
    remaining = n
    while remaining:
        piece = sock.recv(remaining)
        if not piece:
            if allow_eof and remaining == n:
                return None
            raise DecodeError("connection closed mid-frame", field="length")
        chunks.append(piece)
        remaining -= len(piece)
    return b"".join(chunks)
