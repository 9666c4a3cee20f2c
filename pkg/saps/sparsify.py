"""Seed-synchronized Bernoulli masks, masked merge and the sparse wire codec.

Only values travel: both ends of an exchange regenerate the mask from the
round seed, so indices never hit the wire. The count field and the frame CRC
catch a desynchronized seed.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .core import ParameterVector, frozen_array, splitmix_block
from .errors import CountMismatch, InvalidInput, ProtocolError, TruncatedFrame
from .framing import OVERHEAD, MsgType, decode_frame, encode_frame

_PAYLOAD_HEAD = struct.Struct("<QII")  # round, sender, count
VALUE_BYTES = 8


@dataclass(frozen=True, eq=False)
class MaskStream:
    seed: int
    c: int
    n_dims: int
    bits: np.ndarray  # bool, read-only

    def included(self, j: int) -> bool:
        return bool(self.bits[j])

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


def inclusion_threshold(c: int) -> int:
    """floor(2**64 / c): output k is kept iff it falls below this value."""
    return (1 << 64) // c


def generate_mask(seed: int, c: int, n_dims: int) -> MaskStream:
    if int(c) != c or c < 1:
        raise InvalidInput(f"compression ratio must be an integer >= 1, got {c}")
    if n_dims < 1:
        raise InvalidInput(f"model dimension must be >= 1, got {n_dims}")
    if c == 1:
        bits = np.ones(n_dims, dtype=bool)
    else:
        bits = splitmix_block(seed, n_dims) < np.uint64(inclusion_threshold(c))
    return MaskStream(seed=seed, c=int(c), n_dims=n_dims, bits=frozen_array(bits))


@dataclass(frozen=True, eq=False)
class SparsePayload:
    round: int
    sender: int
    values: np.ndarray  # f64 in ascending mask-index order

    @property
    def count(self) -> int:
        return int(self.values.shape[0])

    @property
    def nbytes(self) -> int:
        return self.count * VALUE_BYTES

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparsePayload):
            return NotImplemented
        return (
            self.round == other.round
            and self.sender == other.sender
            and self.values.tobytes() == other.values.tobytes()
        )


def extract_payload(x: ParameterVector, mask: MaskStream, round: int, sender: int) -> SparsePayload:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mask.n_dims,):
        raise InvalidInput(f"model has {x.shape[0]} entries, mask expects {mask.n_dims}")
    return SparsePayload(round=round, sender=sender, values=frozen_array(x[mask.bits]))


def scatter_payload(payload: SparsePayload, mask: MaskStream) -> ParameterVector:
    """Inverse of extract on the masked coordinates; zeros elsewhere."""
    if payload.count != mask.count:
        raise CountMismatch(f"payload carries {payload.count} values, mask selects {mask.count}", worker=payload.sender)
    out = np.zeros(mask.n_dims, dtype=np.float64)
    out[mask.bits] = payload.values
    return out


def merge_masked(x: ParameterVector, mask: MaskStream, peer: SparsePayload) -> ParameterVector:
    """Average own and peer values on masked coordinates; keep the rest."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mask.n_dims,):
        raise InvalidInput(f"model has {x.shape[0]} entries, mask expects {mask.n_dims}")
    if peer.count != mask.count:
        raise CountMismatch(
            f"payload carries {peer.count} values, mask selects {mask.count} (seed desynchronized?)",
            worker=peer.sender,
        )
    out = np.array(x, copy=True)
    out[mask.bits] = (x[mask.bits] + peer.values) / 2.0
    out.setflags(write=False)
    return out


# ---- Wire codec ----
def encode_payload(p: SparsePayload) -> bytes:
    values = np.ascontiguousarray(p.values, dtype="<f8")
    if not np.all(np.isfinite(values)):
        raise InvalidInput("payload contains NaN or Inf")
    body = _PAYLOAD_HEAD.pack(p.round, p.sender, p.count) + values.tobytes()
    return encode_frame(MsgType.MODEL_VALUES, body)


def decode_payload_body(body: bytes) -> SparsePayload:
    if len(body) < _PAYLOAD_HEAD.size:
        raise TruncatedFrame("payload shorter than its fixed fields")
    round, sender, count = _PAYLOAD_HEAD.unpack_from(body)
    expected = _PAYLOAD_HEAD.size + VALUE_BYTES * count
    if len(body) != expected:
        raise ProtocolError(f"payload declares {count} values but carries {len(body) - _PAYLOAD_HEAD.size} bytes", worker=sender)
    values = np.frombuffer(body, dtype="<f8", count=count, offset=_PAYLOAD_HEAD.size).astype(np.float64)
    return SparsePayload(round=round, sender=sender, values=frozen_array(values))


def decode_payload(data: bytes) -> SparsePayload:
    _, body = decode_frame(data, expected_type=MsgType.MODEL_VALUES)
    return decode_payload_body(body)


def payload_frame_size(count: int) -> int:
    return OVERHEAD + _PAYLOAD_HEAD.size + VALUE_BYTES * count
