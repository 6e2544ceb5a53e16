"""Framed wire format for tensors exchanged between ranks.

Frame layout (all integers little-endian)::

    u32  length of the remainder of the frame
    4s   magic "TPI1"  (the digit is the protocol version)
    u8   message type
    u32  layer   (broadcast frames carry the cache position here,
                  hello frames the sender rank)
    u8   phase
    u8   ndim
    u32  dims[ndim]
    f32  payload[prod(dims)]

Only the six message types below exist and every payload is an fp32 tensor,
so nothing resembling a token-id list ever crosses the wire: workers see
embeddings and hidden-state partial sums only. Hello carries the 32-byte
config digest reinterpreted as eight floats; shutdown carries dims=[0].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

FRAME_MAGIC = b"TPI1"


class ProtocolError(RuntimeError):
    """Malformed frame, mismatched collective, handshake failure, or timeout."""


class MsgType(IntEnum):
    HELLO = 1
    BROADCAST = 2
    ALLREDUCE_PUSH = 3
    ALLREDUCE_PULL = 4
    REDUCE = 5
    SHUTDOWN = 6


class Phase(IntEnum):
    ATTN = 1
    FFN = 2
    FINAL = 3


@dataclass
class WireFrame:
    msg_type: MsgType
    layer: int
    phase: Phase
    payload: np.ndarray  # fp32, any rank


def encode_frame(frame: WireFrame) -> bytes:
    payload = np.ascontiguousarray(frame.payload, dtype="<f4")
    header = FRAME_MAGIC + struct.pack(
        f"<BIBB{payload.ndim}I",
        int(frame.msg_type),
        frame.layer,
        int(frame.phase),
        payload.ndim,
        *payload.shape,
    )
    body = header + payload.tobytes()
    return struct.pack("<I", len(body)) + body


def decode_frame(body: bytes) -> WireFrame:
    """Decode a frame body (after the u32 length prefix has been consumed)."""
    if len(body) < 11 or body[:4] != FRAME_MAGIC:
        raise ProtocolError("bad frame magic or truncated frame")
    msg_code, layer, phase_code, ndim = struct.unpack_from("<BIBB", body, 4)
    try:
        msg_type = MsgType(msg_code)
        phase = Phase(phase_code)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_code} or phase {phase_code}") from None
    offset = 11
    dims = struct.unpack_from(f"<{ndim}I", body, offset)
    offset += 4 * ndim
    count = 1
    for dim in dims:
        count *= dim
    expected = 4 * count
    if len(body) - offset != expected:
        raise ProtocolError(
            f"payload length {len(body) - offset} does not match dims {dims}"
        )
    payload = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(dims)
    return WireFrame(msg_type=msg_type, layer=layer, phase=phase, payload=payload)


def hello_frame(rank: int, digest: bytes) -> WireFrame:
    if len(digest) != 32:
        raise ProtocolError("hello digest must be 32 bytes")
    payload = np.frombuffer(digest, dtype="<f4")
    return WireFrame(MsgType.HELLO, rank, Phase.FINAL, payload)


def shutdown_frame() -> WireFrame:
    return WireFrame(MsgType.SHUTDOWN, 0, Phase.FINAL, np.zeros((0,), dtype=np.float32))
