import asyncio
import logging
import sys
from contextlib import asynccontextmanager
from typing import AsyncIterator, Dict, Optional, Tuple

from apscheduler.schedulers.asyncio import AsyncIOScheduler

from ..config import Settings, get_settings
from ..errors import SapsError, TransportError
from ..transport.messages import (
    BandwidthReport,
    Hello,
    ModelFull,
    ModelRequest,
    PeerTable,
    RoundEnd,
    RoundStart,
    Shutdown,
)
from ..transport.sim import COORDINATOR
from ..transport.tcp import PeerListener, TcpEndpoint, open_stream, send_payload
from ..utils import log_event
from .node import WorkerState, begin_worker_round, finish_worker_round

logger = logging.getLogger(__name__)


class TcpWorker:
    """One worker process: a coordinator stream plus a listener for peer payloads."""

    def __init__(
        self,
        state: WorkerState,
        coordinator_host: Optional[str] = None,
        coordinator_port: Optional[int] = None,
        host: Optional[str] = None,
        port: int = 0,
        settings: Optional[Settings] = None,
    ):
        self.settings = settings or get_settings()
        self.state = state
        self.coordinator = (
            coordinator_host or self.settings.COORDINATOR_HOST,
            coordinator_port if coordinator_port is not None else self.settings.COORDINATOR_PORT,
        )
        self.listener = PeerListener(host or self.settings.WORKER_HOST, port)
        self.endpoint = TcpEndpoint()
        self.peers: Tuple[Tuple[str, int], ...] = ()
        # bytes/second seen on the last exchange with each peer
        self.measured: Dict[int, float] = {}

    @property
    def rank(self) -> int:
        return self.state.rank

    async def connect(self) -> None:
        port = await self.listener.start()
        reader, writer = await open_stream(*self.coordinator, timeout=self.settings.CONNECT_TIMEOUT_S)
        self.endpoint.register(COORDINATOR, reader, writer)
        await self.endpoint.send(Hello(self.rank, port, self.listener.host), COORDINATOR)
        table = await self.endpoint.receive(COORDINATOR, PeerTable)
        self.peers = table.addresses
        logger.info("worker %d registered, %d peers known", self.rank, len(self.peers))

    async def report_bandwidth(self) -> None:
        if not self.measured:
            return
        entries = tuple(sorted(self.measured.items()))
        try:
            await self.endpoint.send(BandwidthReport(entries), COORDINATOR)
        except TransportError as exc:
            logger.warning("worker %d could not report bandwidth: %s", self.rank, exc)

    async def play_round(self, msg: RoundStart) -> RoundEnd:
        pending = begin_worker_round(self.state, msg)
        incoming = None
        if pending.outgoing is not None:
            host, port = self.peers[msg.peer_id]
            timing, incoming = await asyncio.gather(
                send_payload(host, port, pending.outgoing, self.settings.CONNECT_TIMEOUT_S),
                self.listener.wait_payload(msg.peer_id, self.settings.ROUND_TIMEOUT_S),
            )
            if timing.bytes_per_second > 0:
                self.measured[msg.peer_id] = timing.bytes_per_second
        end = finish_worker_round(self.state, pending, incoming)
        await self.endpoint.send(end, COORDINATOR)
        return end

    async def serve(self) -> None:
        """Answer the coordinator until it says SHUTDOWN."""
        while True:
            msg = await self.endpoint.receive(COORDINATOR)
            if isinstance(msg, RoundStart):
                await self.play_round(msg)
            elif isinstance(msg, ModelRequest):
                await self.endpoint.send(ModelFull(self.state.x), COORDINATOR)
            elif isinstance(msg, Shutdown):
                logger.info("worker %d shutting down at round %d", self.rank, self.state.round)
                return
            else:
                logger.warning("worker %d ignoring %s", self.rank, type(msg).__name__)

    async def close(self) -> None:
        await self.endpoint.close()
        await self.listener.close()


@asynccontextmanager
async def lifespan(worker: TcpWorker) -> AsyncIterator[TcpWorker]:
    # Startup
    await worker.connect()

    scheduler: Optional[AsyncIOScheduler] = None
    interval = worker.settings.BANDWIDTH_REPORT_INTERVAL_S
    if interval > 0:
        scheduler = AsyncIOScheduler(timezone=worker.settings.TIMEZONE)
        scheduler.add_job(worker.report_bandwidth, "interval", seconds=interval)
        scheduler.start()
        logger.info("worker %d reports bandwidth every %ss", worker.rank, interval)

    try:
        yield worker
    finally:
        # Shutdown
        if scheduler is not None:
            scheduler.shutdown(wait=False)
        await worker.close()


async def run_worker(worker: TcpWorker) -> WorkerState:
    async with lifespan(worker):
        try:
            await worker.serve()
        except SapsError as exc:
            log_event("worker_failed", {"rank": worker.rank, "round": worker.state.round, "error": str(exc)}, logging.ERROR)
            raise
    return worker.state


if __name__ == "__main__":
    from ..cli import main as cli_main

    sys.exit(cli_main(["worker", *sys.argv[1:]]))
