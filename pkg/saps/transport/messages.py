"""Control messages and their SAPS frame bodies.

ROUND_START, ROUND_END, MODEL_FULL and BANDWIDTH_REPORT carry the fields of
the control protocol; HELLO, PEER_TABLE, MODEL_REQUEST and SHUTDOWN are the
session messages the TCP backend needs to find peers and end a run.
MODEL_VALUES bodies are owned by :mod:`saps.sparsify`.
"""
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from ..core import frozen_array
from ..errors import ProtocolError, TruncatedFrame, UnexpectedMessage
from ..framing import OVERHEAD, MsgType, decode_frame, encode_frame
from ..sparsify import SparsePayload, decode_payload_body, encode_payload

NO_PEER = 0xFFFFFFFF

_ROUND_START = struct.Struct("<QQIB")
_ROUND_END = struct.Struct("<QId")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_REPORT_ENTRY = struct.Struct("<Id")
_ADDRESS = struct.Struct("<HB")


@dataclass(frozen=True)
class RoundStart:
    round: int
    seed: int
    peer_id: Optional[int]
    flags: int = 0


@dataclass(frozen=True)
class RoundEnd:
    round: int
    worker_id: int
    local_loss: float


@dataclass(frozen=True, eq=False)
class ModelFull:
    values: np.ndarray

    @property
    def count(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class BandwidthReport:
    entries: Tuple[Tuple[int, float], ...]


@dataclass(frozen=True)
class Hello:
    worker_id: int
    port: int
    host: str = "127.0.0.1"


@dataclass(frozen=True)
class PeerTable:
    addresses: Tuple[Tuple[str, int], ...] = field(default=())


@dataclass(frozen=True)
class ModelRequest:
    pass


@dataclass(frozen=True)
class Shutdown:
    pass


Message = Union[RoundStart, RoundEnd, ModelFull, BandwidthReport, Hello, PeerTable, ModelRequest, Shutdown, SparsePayload]


def _pack_host(host: str, port: int) -> bytes:
    raw = host.encode("utf-8")
    return _ADDRESS.pack(port, len(raw)) + raw


def _unpack_host(body: bytes, offset: int) -> Tuple[str, int, int]:
    if len(body) < offset + _ADDRESS.size:
        raise TruncatedFrame("address entry cut short")
    port, length = _ADDRESS.unpack_from(body, offset)
    offset += _ADDRESS.size
    if len(body) < offset + length:
        raise TruncatedFrame("address host cut short")
    return body[offset:offset + length].decode("utf-8"), port, offset + length


# ---- Encoding ----
def encode_message(msg: Message) -> bytes:
    if isinstance(msg, SparsePayload):
        return encode_payload(msg)
    if isinstance(msg, RoundStart):
        peer = NO_PEER if msg.peer_id is None else msg.peer_id
        return encode_frame(MsgType.ROUND_START, _ROUND_START.pack(msg.round, msg.seed, peer, msg.flags))
    if isinstance(msg, RoundEnd):
        return encode_frame(MsgType.ROUND_END, _ROUND_END.pack(msg.round, msg.worker_id, msg.local_loss))
    if isinstance(msg, ModelFull):
        values = np.ascontiguousarray(msg.values, dtype="<f8")
        return encode_frame(MsgType.MODEL_FULL, _U32.pack(msg.count) + values.tobytes())
    if isinstance(msg, BandwidthReport):
        body = _U16.pack(len(msg.entries)) + b"".join(_REPORT_ENTRY.pack(p, bw) for p, bw in msg.entries)
        return encode_frame(MsgType.BANDWIDTH_REPORT, body)
    if isinstance(msg, Hello):
        return encode_frame(MsgType.HELLO, _U32.pack(msg.worker_id) + _pack_host(msg.host, msg.port))
    if isinstance(msg, PeerTable):
        body = _U32.pack(len(msg.addresses)) + b"".join(_pack_host(h, p) for h, p in msg.addresses)
        return encode_frame(MsgType.PEER_TABLE, body)
    if isinstance(msg, ModelRequest):
        return encode_frame(MsgType.MODEL_REQUEST, b"")
    if isinstance(msg, Shutdown):
        return encode_frame(MsgType.SHUTDOWN, b"")
    raise TypeError(f"cannot encode {type(msg).__name__}")


# ---- Decoding ----
def _expect_len(body: bytes, size: int, what: str) -> None:
    if len(body) < size:
        raise TruncatedFrame(f"{what} body needs {size} bytes, got {len(body)}")
    if len(body) > size:
        raise ProtocolError(f"{what} body has {len(body) - size} trailing bytes")


def decode_body(msg_type: int, body: bytes) -> Message:
    if msg_type == MsgType.MODEL_VALUES:
        return decode_payload_body(body)
    if msg_type == MsgType.ROUND_START:
        _expect_len(body, _ROUND_START.size, "ROUND_START")
        rnd, seed, peer, flags = _ROUND_START.unpack(body)
        return RoundStart(rnd, seed, None if peer == NO_PEER else peer, flags)
    if msg_type == MsgType.ROUND_END:
        _expect_len(body, _ROUND_END.size, "ROUND_END")
        return RoundEnd(*_ROUND_END.unpack(body))
    if msg_type == MsgType.MODEL_FULL:
        if len(body) < _U32.size:
            raise TruncatedFrame("MODEL_FULL body cut short")
        (count,) = _U32.unpack_from(body)
        _expect_len(body, _U32.size + 8 * count, "MODEL_FULL")
        values = np.frombuffer(body, dtype="<f8", count=count, offset=_U32.size).astype(np.float64)
        return ModelFull(frozen_array(values))
    if msg_type == MsgType.BANDWIDTH_REPORT:
        if len(body) < _U16.size:
            raise TruncatedFrame("BANDWIDTH_REPORT body cut short")
        (count,) = _U16.unpack_from(body)
        _expect_len(body, _U16.size + _REPORT_ENTRY.size * count, "BANDWIDTH_REPORT")
        entries = tuple(
            _REPORT_ENTRY.unpack_from(body, _U16.size + k * _REPORT_ENTRY.size) for k in range(count)
        )
        return BandwidthReport(entries)
    if msg_type == MsgType.HELLO:
        if len(body) < _U32.size:
            raise TruncatedFrame("HELLO body cut short")
        (worker_id,) = _U32.unpack_from(body)
        host, port, end = _unpack_host(body, _U32.size)
        _expect_len(body, end, "HELLO")
        return Hello(worker_id, port, host)
    if msg_type == MsgType.PEER_TABLE:
        if len(body) < _U32.size:
            raise TruncatedFrame("PEER_TABLE body cut short")
        (count,) = _U32.unpack_from(body)
        offset = _U32.size
        addresses: List[Tuple[str, int]] = []
        for _ in range(count):
            host, port, offset = _unpack_host(body, offset)
            addresses.append((host, port))
        _expect_len(body, offset, "PEER_TABLE")
        return PeerTable(tuple(addresses))
    if msg_type == MsgType.MODEL_REQUEST:
        _expect_len(body, 0, "MODEL_REQUEST")
        return ModelRequest()
    if msg_type == MsgType.SHUTDOWN:
        _expect_len(body, 0, "SHUTDOWN")
        return Shutdown()
    raise UnexpectedMessage(f"unknown msg_type {msg_type}")


def decode_message(data: bytes) -> Message:
    msg_type, body = decode_frame(data)
    return decode_body(msg_type, body)


def expect(msg: Message, kind: type, worker: Optional[int] = None):
    if not isinstance(msg, kind):
        raise UnexpectedMessage(f"expected {kind.__name__}, got {type(msg).__name__}", worker=worker)
    return msg


def model_frame_size(count: int) -> int:
    """Wire size of a MODEL_FULL frame carrying ``count`` values."""
    return OVERHEAD + _U32.size + 8 * count
