import numpy as np
import pytest

from conftest import crandn
from vflprecode.airlink import QuantizerConfig, dequantize, quantize
from vflprecode.transport import (
    HEADER,
    InProcessTransport,
    Kind,
    Message,
    ProtocolError,
    SocketTransport,
    decode,
    encode,
    make_transport,
    pack_f32,
    pack_feedback,
    unpack_f32,
    unpack_feedback,
)


def test_roundtrip():
    msg = Message(Kind.UPLINK_RAW, 7, b"abcdef")
    frame = encode(msg)
    assert len(frame) == HEADER.size + 6 == msg.nbytes
    assert decode(frame) == msg


def test_bad_version_and_length():
    frame = bytearray(encode(Message(Kind.DOWNLINK_GRAD, 1, b"xyz")))
    with pytest.raises(ProtocolError, match="length"):
        decode(bytes(frame[:-1]))
    frame[0] = 99
    with pytest.raises(ProtocolError, match="version"):
        decode(bytes(frame))


def test_f32_roundtrip(rng):
    a = rng.standard_normal((5, 8))
    b = unpack_f32(pack_f32(a), 8)
    assert b.shape == a.shape
    assert np.allclose(a, b, rtol=1e-7, atol=0)
    assert len(pack_f32(a)) == 5 * 8 * 4


def test_feedback_packing(rng):
    cfg = QuantizerConfig(bits=2)
    fbs = [quantize(crandn(rng, 6), cfg) for _ in range(3)]
    back = unpack_feedback(pack_feedback(fbs), 6, 2)
    for a, b in zip(fbs, back):
        assert a.codes == b.codes
        assert np.allclose(dequantize(a, cfg), dequantize(b, cfg), rtol=1e-6)
    with pytest.raises(ProtocolError):
        unpack_feedback(pack_feedback(fbs)[:-1], 6, 2)


@pytest.mark.parametrize("name", ["inprocess", "socket"])
def test_transport_delivers_frames(name):
    t = make_transport(name, [2, 5])
    try:
        t.client_send(Message(Kind.UPLINK_RAW, 5, b"five"))
        t.client_send(Message(Kind.UPLINK_RAW, 2, b"two"))
        got = t.server_recv()
        assert got[2].payload == b"two" and got[5].payload == b"five"
        t.server_send(Message(Kind.DOWNLINK_GRAD, 2, b"g2"))
        assert t.client_recv(2).payload == b"g2"
        assert [(e.direction, e.vehicle_id) for e in t.trace] == [("up", 2), ("up", 5), ("down", 2)]
    finally:
        t.close()


def test_both_transports_trace_identically():
    traces = []
    for cls in (InProcessTransport, SocketTransport):
        t = cls([0, 1])
        for vid in (1, 0):
            t.client_send(Message(Kind.UPLINK_RAW, vid, bytes(10 + vid)))
        t.server_recv()
        for vid in (0, 1):
            t.server_send(Message(Kind.DOWNLINK_GRAD, vid, bytes(3)))
            t.client_recv(vid)
        traces.append(t.trace)
        t.close()
    assert traces[0] == traces[1]


def test_duplicate_uplink_rejected():
    t = InProcessTransport([0, 1])
    t.client_send(Message(Kind.UPLINK_RAW, 0, b""))
    t.client_send(Message(Kind.UPLINK_RAW, 0, b""))
    with pytest.raises(ProtocolError, match="duplicate"):
        t.server_recv()


def test_unknown_transport():
    with pytest.raises(ValueError):
        make_transport("carrier-pigeon", [0])
