"""SAPS frame: magic, version, msg_type, payload_len, payload, crc32.

Little-endian throughout. The CRC (CRC-32/ISO-HDLC, i.e. zlib.crc32) covers
the payload bytes between the header and the checksum.
"""
import struct
import zlib
from enum import IntEnum
from typing import Optional, Tuple

from .errors import BadMagic, BadVersion, ChecksumMismatch, ProtocolError, TruncatedFrame, UnexpectedMessage

MAGIC = b"SAPS"
VERSION = 1

HEADER = struct.Struct("<4sBBI")
CRC = struct.Struct("<I")
OVERHEAD = HEADER.size + CRC.size


class MsgType(IntEnum):
    ROUND_START = 1
    MODEL_VALUES = 2
    ROUND_END = 3
    MODEL_FULL = 4
    BANDWIDTH_REPORT = 5
    # session management used by the TCP backend
    HELLO = 6
    PEER_TABLE = 7
    MODEL_REQUEST = 8
    SHUTDOWN = 9


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg_type), len(payload)) + payload + CRC.pack(zlib.crc32(payload))


def parse_header(header: bytes) -> Tuple[int, int]:
    """Validate a raw header and return (msg_type, payload_len)."""
    if len(header) < HEADER.size:
        raise TruncatedFrame(f"header needs {HEADER.size} bytes, got {len(header)}")
    magic, version, msg_type, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    return msg_type, length


def check_payload(payload: bytes, crc_bytes: bytes) -> bytes:
    (crc,) = CRC.unpack(crc_bytes)
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch("payload CRC mismatch")
    return payload


def decode_frame(data: bytes, expected_type: Optional[int] = None) -> Tuple[int, bytes]:
    msg_type, length = parse_header(data)
    end = HEADER.size + length
    if len(data) < end + CRC.size:
        raise TruncatedFrame(f"frame needs {end + CRC.size} bytes, got {len(data)}")
    if len(data) > end + CRC.size:
        raise ProtocolError(f"{len(data) - end - CRC.size} trailing bytes after frame")
    payload = check_payload(data[HEADER.size:end], data[end:end + CRC.size])
    if expected_type is not None and msg_type != expected_type:
        raise UnexpectedMessage(f"expected msg_type {int(expected_type)}, got {msg_type}")
    return msg_type, payload
