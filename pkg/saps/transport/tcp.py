"""SAPS frames over asyncio streams.

One long-lived stream per (coordinator, worker) pair, registered in a
``TcpEndpoint``. Peer exchanges use short-lived connections: each side dials
the other's ``PeerListener``, writes its payload and hangs up, then waits for
the peer's payload to arrive on its own listener. No initiator rule is needed
because the two payloads are independent.
"""
import asyncio
import logging
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from ..errors import ProtocolError, TransportError
from ..framing import CRC, HEADER, parse_header
from ..sparsify import SparsePayload
from .messages import Message, decode_message, encode_message, expect

logger = logging.getLogger(__name__)

Stream = Tuple[asyncio.StreamReader, asyncio.StreamWriter]


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    try:
        header = await reader.readexactly(HEADER.size)
        _, length = parse_header(header)
        rest = await reader.readexactly(length + CRC.size)
    except asyncio.IncompleteReadError as exc:
        raise TransportError(f"connection closed after {len(exc.partial)} bytes of a frame") from exc
    except (ConnectionError, OSError) as exc:
        raise TransportError(f"connection lost: {exc}") from exc
    return header + rest


async def read_message(
    reader: asyncio.StreamReader,
    expected_type: Optional[type] = None,
    worker: Optional[int] = None,
) -> Message:
    msg = decode_message(await read_frame(reader))
    return msg if expected_type is None else expect(msg, expected_type, worker)


async def write_message(writer: asyncio.StreamWriter, msg: Message) -> int:
    frame = encode_message(msg)
    try:
        writer.write(frame)
        await writer.drain()
    except (ConnectionError, OSError) as exc:
        raise TransportError(f"connection lost while writing: {exc}") from exc
    return len(frame)


async def open_stream(host: str, port: int, timeout: float) -> Stream:
    try:
        return await asyncio.wait_for(asyncio.open_connection(host, port), timeout=timeout)
    except asyncio.TimeoutError as exc:
        raise TransportError(f"timed out connecting to {host}:{port}") from exc
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc


async def close_stream(writer: asyncio.StreamWriter) -> None:
    writer.close()
    try:
        await writer.wait_closed()
    except (ConnectionError, OSError):
        pass


class TcpEndpoint:
    """Registry of framed streams keyed by the remote's id."""

    def __init__(self):
        self.connections: Dict[int, Stream] = {}
        self._write_locks: Dict[int, asyncio.Lock] = defaultdict(asyncio.Lock)

    def register(self, remote: int, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        if remote in self.connections:
            raise ProtocolError("connection registered twice", worker=remote)
        self.connections[remote] = (reader, writer)

    def _stream(self, remote: int) -> Stream:
        try:
            return self.connections[remote]
        except KeyError:
            raise TransportError(f"no connection to {remote}") from None

    async def send(self, msg: Message, destination: int) -> int:
        _, writer = self._stream(destination)
        async with self._write_locks[destination]:
            return await write_message(writer, msg)

    async def receive(self, source: int, expected_type: Optional[type] = None) -> Message:
        reader, _ = self._stream(source)
        return await read_message(reader, expected_type, worker=source if source >= 0 else None)

    async def close(self) -> None:
        for _, writer in self.connections.values():
            await close_stream(writer)
        self.connections.clear()


@dataclass(frozen=True)
class ExchangeTiming:
    nbytes: int
    seconds: float

    @property
    def bytes_per_second(self) -> float:
        return self.nbytes / self.seconds if self.seconds > 0 else 0.0


class PeerListener:
    """A worker's inbound side for peer payloads, queued per sender."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self._server: Optional[asyncio.AbstractServer] = None
        self._inbox: Dict[int, asyncio.Queue] = defaultdict(asyncio.Queue)
        self.errors: List[Exception] = []

    async def start(self) -> int:
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.debug("peer listener on %s:%d", self.host, self.port)
        return self.port

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            msg = await read_message(reader, SparsePayload)
            await self._inbox[msg.sender].put(msg)
        except (ProtocolError, TransportError) as exc:
            logger.error("bad inbound peer frame: %s", exc)
            self.errors.append(exc)
        finally:
            await close_stream(writer)

    async def wait_payload(self, peer: int, timeout: float) -> SparsePayload:
        try:
            return await asyncio.wait_for(self._inbox[peer].get(), timeout=timeout)
        except asyncio.TimeoutError as exc:
            if self.errors:
                raise self.errors[0] from exc
            raise TransportError(f"no payload from peer {peer} within {timeout}s") from exc

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None


async def send_payload(host: str, port: int, payload: SparsePayload, timeout: float) -> ExchangeTiming:
    started = time.perf_counter()
    _, writer = await open_stream(host, port, timeout)
    try:
        nbytes = await write_message(writer, payload)
    finally:
        await close_stream(writer)
    return ExchangeTiming(nbytes, time.perf_counter() - started)
