"""Per-worker round: local SGD step, seed mask, masked exchange, merge.

A round is split in two halves so the simulated fabric can interleave all
workers in one thread: ``begin_worker_round`` trains and produces the
outgoing payload, ``finish_worker_round`` merges whatever the peer sent.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from ..core import ParameterVector, frozen_array
from ..errors import NumericalError, ProtocolError, RoundMismatch, UnexpectedMessage
from ..objectives import Objective
from ..sparsify import MaskStream, SparsePayload, extract_payload, generate_mask, merge_masked
from ..transport.messages import RoundEnd, RoundStart

logger = logging.getLogger(__name__)


@dataclass
class WorkerState:
    rank: int
    x: ParameterVector
    gamma: float
    c: int
    objective: Objective
    rng: np.random.Generator
    batch_size: Optional[int] = None
    round: int = 0
    values_sent: int = 0
    values_received: int = 0

    @property
    def shard(self):
        return self.objective.shard


@dataclass(frozen=True)
class PendingExchange:
    start: RoundStart
    mask: MaskStream
    loss: float
    outgoing: Optional[SparsePayload] = field(default=None)


def local_sgd_step(state: WorkerState) -> Tuple[ParameterVector, float]:
    idx = state.objective.sample_batch(state.rng, state.batch_size)
    loss, grad = state.objective.loss_and_grad(state.x, idx)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite loss or gradient", round=state.round, rank=state.rank)
    x = state.x - state.gamma * grad
    if not np.all(np.isfinite(x)):
        raise NumericalError("model diverged", round=state.round, rank=state.rank)
    return frozen_array(x), float(loss)


def begin_worker_round(state: WorkerState, msg: RoundStart) -> PendingExchange:
    if msg.round != state.round:
        raise RoundMismatch(f"ROUND_START for round {msg.round}, worker is at round {state.round}", worker=state.rank)
    state.x, loss = local_sgd_step(state)
    mask = generate_mask(msg.seed, state.c, state.x.shape[0])
    outgoing = None
    if msg.peer_id is not None:
        outgoing = extract_payload(state.x, mask, msg.round, state.rank)
        state.values_sent += outgoing.count
    return PendingExchange(start=msg, mask=mask, loss=loss, outgoing=outgoing)


def finish_worker_round(state: WorkerState, pending: PendingExchange, incoming: Optional[SparsePayload]) -> RoundEnd:
    start = pending.start
    if start.peer_id is not None:
        if incoming is None:
            raise ProtocolError(f"no payload from peer {start.peer_id}", worker=start.peer_id)
        if incoming.sender != start.peer_id:
            raise UnexpectedMessage(f"payload from {incoming.sender}, expected peer {start.peer_id}", worker=incoming.sender)
        if incoming.round != start.round:
            raise RoundMismatch(f"peer payload for round {incoming.round}, expected {start.round}", worker=incoming.sender)
        state.x = merge_masked(state.x, pending.mask, incoming)
        state.values_received += incoming.count
    elif incoming is not None:
        raise UnexpectedMessage("payload received in a self-loop round", worker=incoming.sender)
    state.round += 1
    return RoundEnd(round=start.round, worker_id=state.rank, local_loss=pending.loss)


def run_worker_round(
    state: WorkerState,
    msg: RoundStart,
    exchange: Callable[[SparsePayload, int], SparsePayload],
) -> RoundEnd:
    """One full round; ``exchange(payload, peer)`` returns the peer's payload."""
    pending = begin_worker_round(state, msg)
    incoming = None
    if pending.outgoing is not None:
        incoming = exchange(pending.outgoing, msg.peer_id)
    return finish_worker_round(state, pending, incoming)
