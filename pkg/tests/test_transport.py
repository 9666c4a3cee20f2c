import asyncio

import numpy as np
import pytest

from saps.core import Matching, symmetrize_bandwidth
from saps.errors import ConfigurationError, ProtocolError, TransportError, TruncatedFrame, UnexpectedMessage
from saps.framing import MsgType, encode_frame
from saps.sparsify import SparsePayload
from saps.transport.messages import (
    BandwidthReport,
    Hello,
    ModelFull,
    ModelRequest,
    PeerTable,
    RoundEnd,
    RoundStart,
    Shutdown,
    decode_message,
    encode_message,
    model_frame_size,
)
from saps.transport.sim import COORDINATOR, SimChannel, SimNetwork, round_time
from saps.transport.tcp import PeerListener, open_stream, read_frame, read_message, send_payload, write_message

MESSAGES = [
    RoundStart(7, 2 ** 64 - 1, 4),
    RoundStart(0, 0, None),
    RoundEnd(3, 1, -0.25),
    BandwidthReport(((1, 2.5e6), (3, 0.0))),
    Hello(2, 7102, "10.0.0.2"),
    PeerTable((("127.0.0.1", 7100), ("worker-1", 7101))),
    ModelRequest(),
    Shutdown(),
]


# ---- Control messages ----
@pytest.mark.parametrize("msg", MESSAGES, ids=lambda m: type(m).__name__)
def test_message_codec(msg):
    assert decode_message(encode_message(msg)) == msg


def test_model_full_codec():
    values = np.array([1.5, -2.0, 3.25])
    frame = encode_message(ModelFull(values))
    assert len(frame) == model_frame_size(3) == 3 * 8 + 18
    assert decode_message(frame).values.tolist() == values.tolist()


def test_no_peer_sentinel_on_wire():
    frame = encode_message(RoundStart(1, 2, None))
    assert frame[10 + 16:10 + 20] == b"\xff\xff\xff\xff"


def test_trailing_bytes_rejected():
    with pytest.raises(ProtocolError):
        decode_message(encode_frame(MsgType.MODEL_REQUEST, b"\x00"))


def test_short_body_rejected():
    with pytest.raises(TruncatedFrame):
        decode_message(encode_frame(MsgType.ROUND_END, b"\x00" * 4))


def test_unknown_type_rejected():
    with pytest.raises(UnexpectedMessage):
        decode_message(encode_frame(42, b""))


# ---- Simulated network ----
def test_transfer_time():
    assert SimChannel(0, 1, 100.0).transfer_time(800) == 8.0


def test_zero_bandwidth_link():
    net = SimNetwork(symmetrize_bandwidth([[0, 0], [0, 0]]))
    with pytest.raises(ConfigurationError):
        net.send(SparsePayload(0, 0, np.zeros(2)), 0, 1)


def test_round_time_examples():
    b = symmetrize_bandwidth([[0, 2], [2, 0]])
    assert round_time(Matching.from_pairs(2, [(0, 1)]), 10, b) == 5.0
    b4 = symmetrize_bandwidth([[0, 4, 0, 0], [4, 0, 0, 0], [0, 0, 0, 2], [0, 0, 2, 0]])
    assert round_time(Matching.from_pairs(4, [(0, 1), (2, 3)]), 8, b4) == 4.0
    assert round_time(Matching.empty(4), 8, b4) == 0.0


def test_round_time_zero_bandwidth_pair():
    b = symmetrize_bandwidth([[0, 0], [0, 0]])
    with pytest.raises(ConfigurationError):
        round_time(Matching.from_pairs(2, [(0, 1)]), 10, b)


def test_network_clock_uses_slowest_link():
    b = symmetrize_bandwidth([[0, 100, 0, 0], [100, 0, 0, 0], [0, 0, 0, 50], [0, 0, 50, 0]])
    net = SimNetwork(b)
    payload = SparsePayload(0, 0, np.zeros(10))  # 110-byte frame
    for src, dst in [(0, 1), (1, 0), (2, 3), (3, 2)]:
        net.send(payload, src, dst)
    assert net.end_round() == pytest.approx(110 / 50)
    assert net.clock == pytest.approx(110 / 50)
    assert net.end_round() == 0.0


def test_control_traffic_is_free():
    net = SimNetwork(symmetrize_bandwidth([[0, 1], [1, 0]]))
    receipt = net.send(RoundStart(0, 1, 1), COORDINATOR, 0)
    assert receipt.seconds == 0.0
    assert net.control_bytes == receipt.nbytes
    assert net.receive(0, COORDINATOR, RoundStart) == RoundStart(0, 1, 1)


def test_receive_checks_type_and_presence():
    net = SimNetwork(symmetrize_bandwidth([[0, 1], [1, 0]]))
    with pytest.raises(TransportError):
        net.receive(0, 1)
    net.send(RoundEnd(0, 1, 0.0), 1, COORDINATOR)
    with pytest.raises(UnexpectedMessage):
        net.receive(COORDINATOR, 1, RoundStart)


# ---- TCP ----
async def _echo_round_trip(messages):
    async def echo(reader, writer):
        try:
            while True:
                writer.write(await read_frame(reader))
                await writer.drain()
        except TransportError:
            pass
        finally:
            writer.close()

    server = await asyncio.start_server(echo, "127.0.0.1", 0)
    port = server.sockets[0].getsockname()[1]
    reader, writer = await open_stream("127.0.0.1", port, timeout=5.0)
    frames = []
    for msg in messages:
        sent = encode_message(msg)
        await write_message(writer, msg)
        frames.append((sent, await read_frame(reader)))
    writer.close()
    server.close()
    await server.wait_closed()
    return frames


def test_tcp_loopback_is_byte_identical():
    messages = MESSAGES + [SparsePayload(4, 2, np.arange(50.0)), ModelFull(np.ones(3))]
    for sent, received in asyncio.run(_echo_round_trip(messages)):
        assert received == sent


async def _peer_exchange():
    listener = PeerListener("127.0.0.1", 0)
    port = await listener.start()
    payload = SparsePayload(1, 3, np.array([1.0, 2.0]))
    timing = await send_payload("127.0.0.1", port, payload, timeout=5.0)
    got = await listener.wait_payload(3, timeout=5.0)
    await listener.close()
    return payload, got, timing


def test_peer_listener_delivers_payload():
    payload, got, timing = asyncio.run(_peer_exchange())
    assert got == payload
    assert timing.nbytes == 14 + 16 + 16


async def _wait_nothing():
    listener = PeerListener("127.0.0.1", 0)
    await listener.start()
    try:
        await listener.wait_payload(1, timeout=0.05)
    finally:
        await listener.close()


def test_peer_listener_times_out():
    with pytest.raises(TransportError):
        asyncio.run(_wait_nothing())


async def _truncated_stream():
    async def cut(reader, writer):
        writer.write(encode_message(RoundEnd(0, 0, 1.0))[:10])
        await writer.drain()
        writer.close()

    server = await asyncio.start_server(cut, "127.0.0.1", 0)
    port = server.sockets[0].getsockname()[1]
    reader, writer = await open_stream("127.0.0.1", port, timeout=5.0)
    try:
        await read_message(reader)
    finally:
        writer.close()
        server.close()
        await server.wait_closed()


def test_connection_loss_mid_frame():
    with pytest.raises(TransportError):
        asyncio.run(_truncated_stream())


def test_connect_refused():
    async def dial():
        listener = PeerListener("127.0.0.1", 0)
        port = await listener.start()
        await listener.close()
        await open_stream("127.0.0.1", port, timeout=1.0)

    with pytest.raises(TransportError):
        asyncio.run(dial())
