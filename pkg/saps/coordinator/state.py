"""Coordinator state machine.

The coordinator owns B, the filtered graph B*, the timestamp matrix R (held
by its gossip generator) and the master seed stream. A round is
``begin_round`` -> n x ``acknowledge`` -> ``complete_round``; nothing about
the round is committed before the barrier closes, so an aborted round leaves
t and R untouched.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ..analysis import RoundRecord, round_bandwidth
from ..core import AdjacencyMatrix, BandwidthMatrix, Matching, ParameterVector, SplitMix64, symmetrize_bandwidth
from ..errors import (
    ConfigurationError,
    DuplicateAcknowledgment,
    InvalidInput,
    ProtocolError,
    RoundMismatch,
    SapsError,
    UnexpectedMessage,
)
from ..matching import GossipGenerator, GossipRound, PeerSelection
from ..sparsify import VALUE_BYTES, generate_mask, payload_frame_size
from ..transport.messages import ModelFull, RoundEnd, RoundStart
from ..transport.sim import round_time
from ..utils import log_event

logger = logging.getLogger(__name__)


def get_new_connected_graph(b: BandwidthMatrix, b_thres: float) -> AdjacencyMatrix:
    """B*: links at least ``b_thres`` fast (and actually usable)."""
    return AdjacencyMatrix((b.speeds >= b_thres) & (b.speeds > 0))


def default_b_thres(b: BandwidthMatrix) -> float:
    positive = b.positive_values()
    if positive.size == 0:
        raise ConfigurationError("bandwidth matrix has no positive link")
    return float(np.median(positive))


def apply_bandwidth_report(
    raw: np.ndarray,
    reporter: int,
    entries: Iterable[Tuple[int, float]],
) -> Tuple[np.ndarray, BandwidthMatrix]:
    """Record ``reporter``'s measured link speeds and re-symmetrize by min."""
    raw = np.array(raw, dtype=np.float64, copy=True)
    n = raw.shape[0]
    if not 0 <= reporter < n:
        raise InvalidInput(f"reporter {reporter} outside 0..{n - 1}")
    for peer, speed in entries:
        if not 0 <= peer < n or peer == reporter:
            raise InvalidInput(f"worker {reporter} reported an invalid peer {peer}")
        if not np.isfinite(speed) or speed < 0:
            raise InvalidInput(f"worker {reporter} reported bandwidth {speed} for peer {peer}")
        raw[reporter, peer] = speed
    return raw, symmetrize_bandwidth(raw)


@dataclass(frozen=True)
class RoundPlan:
    round: int
    seed: int
    gossip: GossipRound
    starts: Dict[int, RoundStart]

    @property
    def matching(self) -> Matching:
        return self.gossip.matching


@dataclass
class RoundLog:
    round: int
    seed: int
    matching: Matching
    losses: Dict[int, float] = field(default_factory=dict)


class Fleet(Protocol):
    """What the coordinator needs from a transport to drive the workers."""

    def execute_round(self, starts: Dict[int, RoundStart]) -> List[RoundEnd]:
        ...

    def fetch_model(self, rank: int) -> Tuple[ModelFull, int]:
        ...

    def consensus_error(self) -> Optional[float]:
        ...


class CoordinatorState:
    def __init__(
        self,
        bandwidth: BandwidthMatrix,
        n_dims: int,
        c: int,
        master_seed: int,
        t_thres: int,
        b_thres: Optional[float] = None,
        mode: PeerSelection = PeerSelection.ADAPTIVE,
    ):
        if bandwidth.n < 2:
            raise InvalidInput(f"need at least 2 workers, got {bandwidth.n}")
        self.n = bandwidth.n
        self.n_dims = n_dims
        self.c = c
        self.master_seed = master_seed
        self.t_thres = t_thres
        self.raw_bandwidth = np.array(bandwidth.speeds, copy=True)
        self.bandwidth = bandwidth
        self.b_thres = default_b_thres(bandwidth) if b_thres is None else float(b_thres)
        self.b_star = get_new_connected_graph(bandwidth, self.b_thres)
        self.seeds = SplitMix64(master_seed)
        self.generator = GossipGenerator(bandwidth, self.b_star, t_thres, np.random.default_rng(master_seed), mode)

        self.t = 0
        self.cum_time = 0.0
        self.records: List[RoundRecord] = []
        self.history: List[RoundLog] = []
        self.model_bytes_received = 0
        self._plan: Optional[RoundPlan] = None
        self._acks: Dict[int, float] = {}
        self._reports: List[Tuple[int, Tuple[Tuple[int, float], ...]]] = []

    @property
    def timestamps(self):
        return self.generator.timestamps

    @property
    def in_round(self) -> bool:
        return self._plan is not None

    # ---- Round lifecycle ----
    def begin_round(self) -> RoundPlan:
        if self._plan is not None:
            raise ProtocolError(f"round {self.t} is already in progress")
        seed = self.seeds.next_u64()
        gossip = self.generator.propose(self.t)
        peers = gossip.matching.peers()
        starts = {rank: RoundStart(round=self.t, seed=seed, peer_id=peers[rank]) for rank in range(self.n)}
        self._plan = RoundPlan(self.t, seed, gossip, starts)
        self._acks = {}
        log_event("round_start", {"round": self.t, "pairs": len(gossip.matching), "bridged": gossip.bridged}, logging.DEBUG)
        return self._plan

    def acknowledge(self, msg: RoundEnd) -> None:
        if self._plan is None:
            raise UnexpectedMessage("ROUND_END outside a round", worker=msg.worker_id)
        if not 0 <= msg.worker_id < self.n:
            raise UnexpectedMessage(f"unknown worker id {msg.worker_id}")
        if msg.round != self.t:
            raise RoundMismatch(f"ROUND_END for round {msg.round} during round {self.t}", worker=msg.worker_id)
        if msg.worker_id in self._acks:
            raise DuplicateAcknowledgment(f"second ROUND_END for round {self.t}", worker=msg.worker_id)
        self._acks[msg.worker_id] = msg.local_loss

    def complete_round(self, consensus_err: Optional[float] = None) -> RoundRecord:
        plan = self._plan
        if plan is None:
            raise ProtocolError("no round in progress")
        missing = sorted(set(range(self.n)) - set(self._acks))
        if missing:
            raise ProtocolError(f"barrier incomplete for round {self.t}, missing workers {missing}")

        matching = plan.matching
        count = generate_mask(plan.seed, self.c, self.n_dims).count
        # each matched worker sends and receives count values
        bytes_per_worker = 2 * VALUE_BYTES * count * 2 * len(matching) / self.n
        duration = round_time(matching, payload_frame_size(count), self.bandwidth)
        low, mean = round_bandwidth(self.bandwidth, matching)
        self.cum_time += duration

        record = RoundRecord(
            round=self.t,
            pairs=len(matching),
            bytes_per_worker=bytes_per_worker,
            min_bw=low,
            mean_bw=mean,
            consensus_err=consensus_err,
            mean_loss=float(np.mean([self._acks[r] for r in range(self.n)])),
            cum_time=self.cum_time,
        )
        self.generator.commit(plan.gossip)
        self.records.append(record)
        self.history.append(RoundLog(self.t, plan.seed, matching, dict(self._acks)))
        self.t += 1
        self._plan = None
        self._acks = {}
        reports, self._reports = self._reports, []
        for reporter, entries in reports:
            try:
                self.apply_bandwidth_report(reporter, entries)
            except InvalidInput as exc:
                logger.warning("dropping bandwidth report: %s", exc)
        log_event("round_end", record.as_dict(), logging.DEBUG)
        return record

    def abort_round(self, reason: str) -> None:
        if self._plan is not None:
            logger.error("round %d aborted: %s", self.t, reason)
            log_event("round_aborted", {"round": self.t, "reason": reason}, logging.ERROR)
        self._plan = None
        self._acks = {}

    # ---- Bandwidth updates ----
    def apply_bandwidth_report(self, reporter: int, entries: Sequence[Tuple[int, float]]) -> None:
        """Fold a BANDWIDTH_REPORT into B; deferred while a round is open. B* stays fixed."""
        if self._plan is not None:
            self._reports.append((reporter, tuple(entries)))
            return
        self.raw_bandwidth, self.bandwidth = apply_bandwidth_report(self.raw_bandwidth, reporter, entries)
        self.generator.update_bandwidth(self.bandwidth)
        logger.info("bandwidth report from worker %d applied (%d links)", reporter, len(entries))

    def note_model_received(self, model: ModelFull, nbytes: int) -> ParameterVector:
        if model.count != self.n_dims:
            raise ProtocolError(f"final model has {model.count} values, expected {self.n_dims}", worker=0)
        self.model_bytes_received += nbytes
        return model.values


def run_round(state: CoordinatorState, fleet: Fleet) -> RoundRecord:
    plan = state.begin_round()
    try:
        for ack in fleet.execute_round(plan.starts):
            state.acknowledge(ack)
        return state.complete_round(consensus_err=fleet.consensus_error())
    except SapsError as exc:
        state.abort_round(str(exc))
        raise


def collect_final_model(state: CoordinatorState, fleet: Fleet) -> ParameterVector:
    model, nbytes = fleet.fetch_model(0)
    values = state.note_model_received(model, nbytes)
    log_event("final_model", {"round": state.t, "bytes": nbytes})
    return values
