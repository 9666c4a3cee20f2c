"""Deterministic in-process network with bandwidth-derived virtual timing.

Every message is encoded to its SAPS frame and decoded on delivery, so the
simulated run exercises the same codec as TCP. Peer links charge
``frame_bytes / B_ij`` virtual seconds; links run concurrently within a round,
so a round lasts as long as its slowest link. Control traffic to and from the
coordinator is counted but takes no virtual time.
"""
import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..analysis import consensus_error
from ..core import BandwidthMatrix, Matching
from ..errors import ConfigurationError, TransportError
from ..sparsify import SparsePayload
from ..worker.node import PendingExchange, WorkerState, begin_worker_round, finish_worker_round
from .messages import Message, ModelFull, ModelRequest, RoundEnd, RoundStart, decode_message, encode_message, expect

logger = logging.getLogger(__name__)

COORDINATOR = -1


@dataclass(frozen=True)
class SimChannel:
    a: int
    b: int
    bandwidth: float  # bytes/second

    def transfer_time(self, nbytes: int) -> float:
        if self.bandwidth <= 0:
            raise ConfigurationError(f"link ({self.a}, {self.b}) has zero bandwidth")
        return nbytes / self.bandwidth


@dataclass(frozen=True)
class DeliveryReceipt:
    source: int
    destination: int
    nbytes: int
    seconds: float


def round_time(match: Matching, payload_bytes: int, b: BandwidthMatrix) -> float:
    """Seconds until the slowest matched exchange of ``payload_bytes`` finishes."""
    if not match.pairs:
        return 0.0
    slowest = min(b[i, j] for i, j in match.pairs)
    if slowest <= 0:
        raise ConfigurationError("matched pair with zero bandwidth")
    return payload_bytes / slowest


class SimNetwork:
    def __init__(self, bandwidth: BandwidthMatrix):
        self.bandwidth = bandwidth
        self._mailboxes: Dict[Tuple[int, int], Deque[bytes]] = defaultdict(deque)
        self._link_busy: Dict[Tuple[int, int], float] = defaultdict(float)
        self.clock = 0.0
        self.bytes_sent: Dict[int, int] = defaultdict(int)
        self.bytes_received: Dict[int, int] = defaultdict(int)
        self.control_bytes = 0

    def channel(self, i: int, j: int) -> SimChannel:
        return SimChannel(min(i, j), max(i, j), self.bandwidth[i, j])

    def update_bandwidth(self, bandwidth: BandwidthMatrix) -> None:
        self.bandwidth = bandwidth

    def send(self, msg: Message, source: int, destination: int) -> DeliveryReceipt:
        frame = encode_message(msg)
        seconds = 0.0
        if COORDINATOR in (source, destination):
            self.control_bytes += len(frame)
        else:
            seconds = self.channel(source, destination).transfer_time(len(frame))
            # both directions of a pair share one full-duplex link
            link = (min(source, destination), max(source, destination))
            self._link_busy[link] = max(self._link_busy[link], seconds)
        self.bytes_sent[source] += len(frame)
        self._mailboxes[(source, destination)].append(frame)
        return DeliveryReceipt(source, destination, len(frame), seconds)

    def receive(self, destination: int, source: int, expected_type: Optional[type] = None) -> Message:
        box = self._mailboxes.get((source, destination))
        if not box:
            raise TransportError(f"no message queued from {source} to {destination}")
        frame = box.popleft()
        self.bytes_received[destination] += len(frame)
        msg = decode_message(frame)
        if expected_type is None:
            return msg
        return expect(msg, expected_type, worker=source if source != COORDINATOR else None)

    def end_round(self) -> float:
        """Advance the clock by this round's critical path and return it."""
        duration = max(self._link_busy.values(), default=0.0)
        self._link_busy.clear()
        self.clock += duration
        return duration


class SimFleet:
    """In-process workers driven one round at a time over a SimNetwork.

    Every worker trains and sends before anyone merges, which is the
    single-threaded equivalent of the full-duplex exchange.
    """

    def __init__(self, workers: Sequence[WorkerState], network: SimNetwork):
        self.workers = list(workers)
        self.network = network
        self.last_round_time = 0.0

    def execute_round(self, starts: Dict[int, RoundStart]) -> List[RoundEnd]:
        net = self.network
        for rank in sorted(starts):
            net.send(starts[rank], COORDINATOR, rank)

        pending: Dict[int, PendingExchange] = {}
        for w in self.workers:
            msg = net.receive(w.rank, COORDINATOR, RoundStart)
            pending[w.rank] = begin_worker_round(w, msg)
            if pending[w.rank].outgoing is not None:
                net.send(pending[w.rank].outgoing, w.rank, msg.peer_id)

        for w in self.workers:
            p = pending[w.rank]
            incoming = None
            if p.start.peer_id is not None:
                incoming = net.receive(w.rank, p.start.peer_id, SparsePayload)
            net.send(finish_worker_round(w, p, incoming), w.rank, COORDINATOR)

        self.last_round_time = net.end_round()
        return [net.receive(COORDINATOR, w.rank, RoundEnd) for w in self.workers]

    def fetch_model(self, rank: int) -> Tuple[ModelFull, int]:
        net = self.network
        net.send(ModelRequest(), COORDINATOR, rank)
        net.receive(rank, COORDINATOR, ModelRequest)
        receipt = net.send(ModelFull(self.workers[rank].x), rank, COORDINATOR)
        return net.receive(COORDINATOR, rank, ModelFull), receipt.nbytes

    def models(self) -> np.ndarray:
        return np.array([w.x for w in self.workers])

    def consensus_error(self) -> Optional[float]:
        return consensus_error(self.models())
