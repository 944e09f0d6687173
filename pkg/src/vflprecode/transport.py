"""Message schema and the two transports used by the split-training protocol.

Wire frame (little-endian): version u8, kind u8, vehicle id u32, payload length u32,
payload. Raw vectors and gradients travel as f32 arrays; quantized feedback
travels as, per vector, an f32 norm followed by the packed code bits.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .airlink import Feedback

WIRE_VERSION = 1
HEADER = struct.Struct("<BBII")


class Kind(IntEnum):
    UPLINK_RAW = 1
    UPLINK_QUANT = 2
    DOWNLINK_GRAD = 3


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Message:
    kind: Kind
    vehicle_id: int
    payload: bytes

    @property
    def nbytes(self) -> int:
        return HEADER.size + len(self.payload)


def encode(msg: Message) -> bytes:
    return HEADER.pack(WIRE_VERSION, int(msg.kind), msg.vehicle_id, len(msg.payload)) + msg.payload


def decode(frame: bytes) -> Message:
    version, kind, vid, length = HEADER.unpack_from(frame)
    if version != WIRE_VERSION:
        raise ProtocolError(f"wire version {version} != {WIRE_VERSION}")
    payload = frame[HEADER.size :]
    if len(payload) != length:
        raise ProtocolError(f"payload length {len(payload)} != header {length}")
    return Message(Kind(kind), vid, payload)


def pack_f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_f32(payload: bytes, width: int) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f4").astype(float).reshape(-1, width)


def pack_feedback(items) -> bytes:
    return b"".join(struct.pack("<f", fb.norm) + fb.codes for fb in items)


def unpack_feedback(payload: bytes, n: int, bits: int) -> list[Feedback]:
    code_len = (2 * n * bits + 7) // 8
    step = 4 + code_len
    if len(payload) % step:
        raise ProtocolError("quantized payload is not a whole number of vectors")
    out = []
    for off in range(0, len(payload), step):
        (norm,) = struct.unpack_from("<f", payload, off)
        out.append(Feedback(n, bits, float(norm), payload[off + 4 : off + step]))
    return out


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    direction: str  # "up" or "down"
    vehicle_id: int
    kind: int
    nbytes: int


class _TraceMixin:
    def _init_trace(self):
        self.trace: list[TraceEntry] = []
        self.iteration = 0
        self._lock = threading.Lock()

    def _record(self, direction, msg: Message):
        with self._lock:
            self.trace.append(TraceEntry(self.iteration, direction, msg.vehicle_id, int(msg.kind), msg.nbytes))


class InProcessTransport(_TraceMixin):
    """Queues carrying encoded frames, so both transports move identical bytes."""

    def __init__(self, vehicle_ids):
        self._init_trace()
        self._up: queue.Queue = queue.Queue()
        self._down = {}
        self.reset(vehicle_ids)

    def reset(self, vehicle_ids):
        self.vehicle_ids = sorted(vehicle_ids)
        self._down = {v: queue.Queue() for v in self.vehicle_ids}
        self.drain()

    def drain(self):
        for q in [self._up, *self._down.values()]:
            while not q.empty():
                q.get_nowait()

    def client_send(self, msg: Message) -> None:
        self._up.put(encode(msg))

    def server_recv(self, timeout: float = 60.0) -> dict[int, Message]:
        got = {}
        for _ in self.vehicle_ids:
            msg = decode(self._up.get(timeout=timeout))
            if msg.vehicle_id in got:
                raise ProtocolError(f"duplicate uplink from vehicle {msg.vehicle_id}")
            got[msg.vehicle_id] = msg
        for vid in sorted(got):
            self._record("up", got[vid])
        return got

    def server_send(self, msg: Message) -> None:
        self._record("down", msg)
        self._down[msg.vehicle_id].put(encode(msg))

    def client_recv(self, vehicle_id: int, timeout: float = 60.0) -> Message:
        return decode(self._down[vehicle_id].get(timeout=timeout))

    def close(self):
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("socket closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def _read_frame(sock: socket.socket) -> Message:
    head = _recv_exact(sock, HEADER.size)
    length = HEADER.unpack(head)[3]
    return decode(head + _recv_exact(sock, length))


class SocketTransport(_TraceMixin):
    """Length-prefixed frames over one local socket pair per vehicle."""

    def __init__(self, vehicle_ids, timeout: float = 60.0):
        self._init_trace()
        self.timeout = timeout
        self._pairs: dict[int, tuple[socket.socket, socket.socket]] = {}
        self.reset(vehicle_ids)

    def reset(self, vehicle_ids):
        self.close()
        self.vehicle_ids = sorted(vehicle_ids)
        for v in self.vehicle_ids:
            srv, cli = socket.socketpair()
            srv.settimeout(self.timeout)
            cli.settimeout(self.timeout)
            self._pairs[v] = (srv, cli)

    def drain(self):
        # frames of an aborted round are discarded by rebuilding the pairs
        self.reset(self.vehicle_ids)

    def client_send(self, msg: Message) -> None:
        self._pairs[msg.vehicle_id][1].sendall(encode(msg))

    def server_recv(self) -> dict[int, Message]:
        got = {}
        for vid in self.vehicle_ids:
            msg = _read_frame(self._pairs[vid][0])
            if msg.vehicle_id != vid:
                raise ProtocolError(f"frame for vehicle {msg.vehicle_id} on socket of vehicle {vid}")
            got[vid] = msg
            self._record("up", msg)
        return got

    def server_send(self, msg: Message) -> None:
        self._record("down", msg)
        self._pairs[msg.vehicle_id][0].sendall(encode(msg))

    def client_recv(self, vehicle_id: int) -> Message:
        return _read_frame(self._pairs[vehicle_id][1])

    def close(self):
        for srv, cli in self._pairs.values():
            srv.close()
            cli.close()
        self._pairs = {}


def make_transport(name: str, vehicle_ids):
    if name == "inprocess":
        return InProcessTransport(vehicle_ids)
    if name == "socket":
        return SocketTransport(vehicle_ids)
    raise ValueError(f"unknown transport {name!r}")
