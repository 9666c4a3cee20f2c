"""TCP coordinator: registration, round barrier and final model collection.

Every worker stream gets a reader task that pushes ``(rank, message)`` onto
one queue; the round loop is the only consumer, so acknowledgments reach the
state machine in a single order however they arrive on the wire.
"""
import asyncio
import logging
import sys
from contextlib import asynccontextmanager
from typing import AsyncIterator, Dict, List, Optional, Sequence, Tuple

from ..analysis import RoundRecord
from ..config import Settings, get_settings
from ..core import ParameterVector
from ..errors import InvalidInput, ProtocolError, SapsError, TransportError, UnexpectedMessage
from ..transport.messages import (
    BandwidthReport,
    Hello,
    Message,
    ModelFull,
    ModelRequest,
    PeerTable,
    RoundEnd,
    Shutdown,
    expect,
    model_frame_size,
)
from ..transport.tcp import TcpEndpoint, close_stream, read_message
from ..utils import log_event
from ..worker.node import WorkerState
from ..worker.run import TcpWorker, run_worker
from .state import CoordinatorState

logger = logging.getLogger(__name__)

Event = Tuple[int, object]


class CoordinatorServer:
    def __init__(
        self,
        state: CoordinatorState,
        host: Optional[str] = None,
        port: Optional[int] = None,
        settings: Optional[Settings] = None,
    ):
        self.settings = settings or get_settings()
        self.state = state
        self.host = host or self.settings.COORDINATOR_HOST
        self.port = self.settings.COORDINATOR_PORT if port is None else port
        self.endpoint = TcpEndpoint()
        self.addresses: Dict[int, Tuple[str, int]] = {}
        self._server: Optional[asyncio.AbstractServer] = None
        self._events: Optional[asyncio.Queue] = None
        self._ready: Optional[asyncio.Event] = None
        self._closing = False

    async def start(self) -> int:
        self._events = asyncio.Queue()
        self._ready = asyncio.Event()
        self._server = await asyncio.start_server(self._on_connect, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info("coordinator listening on %s:%d for %d workers", self.host, self.port, self.state.n)
        return self.port

    # ---- Registration ----
    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            hello = await asyncio.wait_for(read_message(reader, Hello), timeout=self.settings.CONNECT_TIMEOUT_S)
        except (SapsError, asyncio.TimeoutError) as exc:
            logger.error("dropping connection without a valid HELLO: %s", exc)
            await close_stream(writer)
            return

        rank = hello.worker_id
        if not 0 <= rank < self.state.n or rank in self.addresses:
            logger.error("rejecting HELLO from worker %d", rank)
            await close_stream(writer)
            return
        self.endpoint.register(rank, reader, writer)
        self.addresses[rank] = (hello.host, hello.port)
        log_event("worker_registered", {"rank": rank, "host": hello.host, "port": hello.port})
        if len(self.addresses) == self.state.n:
            self._ready.set()
        await self._pump(rank, reader)

    async def _pump(self, rank: int, reader: asyncio.StreamReader) -> None:
        while True:
            try:
                msg = await read_message(reader, worker=rank)
            except SapsError as exc:
                if not self._closing:
                    await self._events.put((rank, exc))
                return
            await self._events.put((rank, msg))

    async def wait_for_workers(self, timeout: Optional[float] = None) -> None:
        timeout = self.settings.ROUND_TIMEOUT_S if timeout is None else timeout
        try:
            await asyncio.wait_for(self._ready.wait(), timeout=timeout)
        except asyncio.TimeoutError as exc:
            missing = sorted(set(range(self.state.n)) - set(self.addresses))
            raise TransportError(f"workers {missing} did not register within {timeout}s") from exc
        table = PeerTable(tuple(self.addresses[r] for r in range(self.state.n)))
        for rank in range(self.state.n):
            await self.endpoint.send(table, rank)

    # ---- Event queue ----
    async def _next_event(self) -> Tuple[int, Message]:
        timeout = self.settings.ROUND_TIMEOUT_S
        try:
            rank, item = await asyncio.wait_for(self._events.get(), timeout=timeout)
        except asyncio.TimeoutError as exc:
            raise TransportError(f"no worker message within {timeout}s") from exc
        if isinstance(item, Exception):
            raise item
        return rank, item

    def _take_report(self, rank: int, msg: BandwidthReport) -> None:
        try:
            self.state.apply_bandwidth_report(rank, msg.entries)
        except InvalidInput as exc:
            logger.warning("dropping bandwidth report: %s", exc)

    # ---- Rounds ----
    async def run_round(self) -> RoundRecord:
        state = self.state
        plan = state.begin_round()
        try:
            for rank in sorted(plan.starts):
                await self.endpoint.send(plan.starts[rank], rank)
            acked = 0
            while acked < state.n:
                rank, msg = await self._next_event()
                if isinstance(msg, BandwidthReport):
                    self._take_report(rank, msg)
                    continue
                expect(msg, RoundEnd, rank)
                if msg.worker_id != rank:
                    raise ProtocolError(f"ROUND_END claims worker id {msg.worker_id}", worker=rank)
                state.acknowledge(msg)
                acked += 1
            # worker models are not observable over TCP
            return state.complete_round(consensus_err=None)
        except SapsError as exc:
            state.abort_round(str(exc))
            raise

    async def collect_final_model(self) -> ParameterVector:
        await self.endpoint.send(ModelRequest(), 0)
        while True:
            rank, msg = await self._next_event()
            if isinstance(msg, BandwidthReport):
                self._take_report(rank, msg)
                continue
            if rank != 0 or not isinstance(msg, ModelFull):
                raise UnexpectedMessage(f"expected ModelFull from worker 0, got {type(msg).__name__}", worker=rank)
            break
        nbytes = model_frame_size(msg.count)
        values = self.state.note_model_received(msg, nbytes)
        log_event("final_model", {"round": self.state.t, "bytes": nbytes})
        return values

    async def shutdown(self) -> None:
        self._closing = True
        for rank in sorted(self.endpoint.connections):
            try:
                await self.endpoint.send(Shutdown(), rank)
            except TransportError:
                logger.warning("worker %d gone before SHUTDOWN", rank)
        await self.endpoint.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None


@asynccontextmanager
async def serving(server: CoordinatorServer) -> AsyncIterator[CoordinatorServer]:
    await server.start()
    try:
        yield server
    finally:
        await server.shutdown()


async def run_coordinator(server: CoordinatorServer, rounds: int) -> Tuple[List[RoundRecord], ParameterVector]:
    """Drive ``rounds`` rounds on a started server and collect worker 0's model."""
    await server.wait_for_workers()
    for _ in range(rounds):
        await server.run_round()
    model = await server.collect_final_model()
    return list(server.state.records), model


async def run_loopback(
    state: CoordinatorState,
    workers: Sequence[WorkerState],
    rounds: int,
    settings: Optional[Settings] = None,
) -> Tuple[List[RoundRecord], ParameterVector]:
    """Coordinator and every worker in one event loop, over real loopback sockets."""
    settings = settings or get_settings()
    server = CoordinatorServer(state, host="127.0.0.1", port=0, settings=settings)
    async with serving(server):
        tasks = [
            asyncio.create_task(run_worker(TcpWorker(w, "127.0.0.1", server.port, host="127.0.0.1", settings=settings)))
            for w in workers
        ]
        try:
            result = await run_coordinator(server, rounds)
        except BaseException:
            for task in tasks:
                task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            raise
    await asyncio.gather(*tasks)
    return result


if __name__ == "__main__":
    from ..cli import main as cli_main

    sys.exit(cli_main(["coordinator", *sys.argv[1:]]))
