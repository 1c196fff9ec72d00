"""Peer wire protocol: 4-byte big-endian length prefix, then a UTF-8 JSON object."""

from __future__ import annotations

import json
import socket
import struct
from typing import Any

from .errors import WireError
from .flight import Membership, Message, PeeringRequest, StateUpdate

HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


def to_wire(msg: Message) -> dict[str, Any]:
    if isinstance(msg, StateUpdate):
        return {
            "kind": "state_update",
            "activation_id": msg.activation_id,
            "task": msg.task,
            "output": msg.output,
            "is_error": msg.is_error,
            "origin_offset": msg.origin_offset,
            "sequence": msg.sequence,
        }
    if isinstance(msg, PeeringRequest):
        return {
            "kind": "peering_request",
            "activation_id": msg.activation_id,
            "sender_offset": msg.sender_offset,
            "sender_address": msg.sender_address,
        }
    if isinstance(msg, Membership):
        return {
            "kind": "membership",
            "activation_id": msg.activation_id,
            "members": {str(o): a for o, a in msg.members},
        }
    raise WireError(f"cannot encode {type(msg).__name__}")


def from_wire(doc: dict[str, Any]) -> Message:
    try:
        kind = doc["kind"]
        if kind == "state_update":
            return StateUpdate(
                activation_id=doc["activation_id"],
                task=doc["task"],
                output=doc.get("output"),
                is_error=bool(doc["is_error"]),
                origin_offset=int(doc["origin_offset"]),
                sequence=int(doc["sequence"]),
            )
        if kind == "peering_request":
            return PeeringRequest(doc["activation_id"], int(doc["sender_offset"]), doc["sender_address"])
        if kind == "membership":
            members = tuple(sorted((int(o), a) for o, a in doc["members"].items()))
            return Membership(doc["activation_id"], members)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise WireError(f"malformed {doc.get('kind', '?')} message: {exc}") from exc
    except Exception as exc:  # invariant violations from the message types
        raise WireError(str(exc)) from exc
    raise WireError(f"unknown message kind {kind!r}")


def encode(msg: Message) -> bytes:
    body = json.dumps(to_wire(msg), separators=(",", ":")).encode()
    return HEADER.pack(len(body)) + body


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER.size:
        raise WireError("short frame")
    (n,) = HEADER.unpack_from(frame)
    body = frame[HEADER.size:]
    if len(body) != n:
        raise WireError(f"frame declares {n} bytes, carries {len(body)}")
    return from_wire(json.loads(body))


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise WireError("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def read_message(sock: socket.socket) -> Message | None:
    """Next message from a stream, or None on clean EOF."""
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    (n,) = HEADER.unpack(head)
    if n > MAX_FRAME:
        raise WireError(f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n) if n else b""
    if body is None:
        raise WireError("connection closed mid-frame")
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise WireError(f"frame is not JSON: {exc}") from exc
    return from_wire(doc)


def write_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))
