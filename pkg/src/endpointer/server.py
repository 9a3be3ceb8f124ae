"""Streaming detector service over a length-prefixed binary protocol.

Message layout (all little-endian):

    u32 length      payload bytes (type byte excluded), capped at 16 MiB
    u8  type
    payload

Types:

    HELLO    = 1   u8 n_streams, u32 dim, f32 frame_rate_hz
    READY    = 2   (empty)
    ERROR    = 3   utf-8 message
    FRAME    = 4   u32 frame_index, dim f32 per stream, u8 sys_active
    PROBS    = 5   u32 frame_index, 4 f32
    ENDPOINT = 6   u8 kind (label class), u32 frame_index, u32 time_ms
    BYE      = 7   (empty)

One detector session per connection; a connection's frames are processed
strictly in order, so PROBS for frame i always precede PROBS for frame i+1.
When a frame triggers an endpoint, the ENDPOINT message is sent before that
frame's PROBS, giving clients an unambiguous read order.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from typing import Optional

import numpy as np

from .detector import DetectorSession, EVENT_CLASS
from .errors import ProtocolError
from .model import ModelCheckpoint, SINGLE_STREAM

log = logging.getLogger(__name__)

MSG_HELLO = 1
MSG_READY = 2
MSG_ERROR = 3
MSG_FRAME = 4
MSG_PROBS = 5
MSG_ENDPOINT = 6
MSG_BYE = 7

MAX_PAYLOAD = 16 * 1024 * 1024

_HELLO = struct.Struct("<BIf")
_ENDPOINT = struct.Struct("<BII")


def pack_message(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds cap")
    return struct.pack("<IB", len(payload), msg_type) + payload


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> tuple[int, bytes]:
    header = recv_exact(sock, 5)
    length, msg_type = struct.unpack("<IB", header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload {length} exceeds 16 MiB cap")
    payload = recv_exact(sock, length) if length else b""
    return msg_type, payload


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: DetectorServer = self.server    # type: ignore[assignment]
        sock = self.request
        config = server.checkpoint.config
        expect_streams = 1 if config.arch == SINGLE_STREAM else 2
        latencies: list[float] = []
        try:
            msg_type, payload = recv_message(sock)
            if msg_type != MSG_HELLO or len(payload) != _HELLO.size:
                sock.sendall(pack_message(MSG_ERROR, b"expected HELLO"))
                return
            n_streams, dim, frame_rate = _HELLO.unpack(payload)
            if n_streams != expect_streams or dim != config.input_dim:
                sock.sendall(pack_message(
                    MSG_ERROR,
                    f"model expects {expect_streams} stream(s) of dim "
                    f"{config.input_dim}, client offered {n_streams}x{dim}"
                    .encode()))
                return
            sock.sendall(pack_message(MSG_READY))
            session = DetectorSession(server.checkpoint, server.threshold,
                                      frame_rate, arm_system=server.arm_system)
            expected_len = 4 + 4 * dim * n_streams + 1
            while True:
                msg_type, payload = recv_message(sock)
                if msg_type == MSG_BYE:
                    break
                if msg_type != MSG_FRAME:
                    sock.sendall(pack_message(
                        MSG_ERROR,
                        f"unexpected message type {msg_type}".encode()))
                    return
                if len(payload) != expected_len:
                    sock.sendall(pack_message(
                        MSG_ERROR,
                        f"FRAME payload must be {expected_len} bytes".encode()))
                    return
                (frame_index,) = struct.unpack_from("<I", payload, 0)
                vecs = np.frombuffer(payload, dtype="<f4",
                                     count=dim * n_streams, offset=4)
                sys_active = payload[-1]
                started = time.perf_counter()
                if n_streams == 1:
                    probs, event = session.step(vecs, sys_active=int(sys_active))
                else:
                    probs, event = session.step((vecs[:dim], vecs[dim:]))
                latencies.append(time.perf_counter() - started)
                reply = b""
                if event is not None:
                    reply += pack_message(MSG_ENDPOINT, _ENDPOINT.pack(
                        EVENT_CLASS[event.kind], event.frame_index,
                        event.time_ms))
                reply += pack_message(
                    MSG_PROBS, struct.pack("<I", frame_index)
                    + np.asarray(probs, dtype="<f4").tobytes())
                sock.sendall(reply)
        except (ConnectionError, ProtocolError, struct.error) as err:
            log.info("connection closed: %s", err)
        finally:
            if latencies:
                arr = np.array(latencies)
                log.info("served %d frames: per-frame latency p50 %.3f ms, "
                         "p90 %.3f ms", len(arr),
                         1000 * np.percentile(arr, 50),
                         1000 * np.percentile(arr, 90))


class DetectorServer(socketserver.ThreadingTCPServer):
    """One detector session per connection; connections are isolated."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], checkpoint: ModelCheckpoint,
                 threshold: float, arm_system: bool = False):
        self.checkpoint = checkpoint
        self.threshold = threshold
        self.arm_system = arm_system
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(bind: tuple[str, int], checkpoint: ModelCheckpoint, threshold: float,
          arm_system: bool = False, background: bool = False
          ) -> DetectorServer:
    """Start the service; blocks unless background=True."""
    server = DetectorServer(bind, checkpoint, threshold, arm_system=arm_system)
    if background:
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        return server
    try:
        log.info("listening on %s:%d", *server.server_address)
        server.serve_forever()
    finally:
        server.server_close()
    return server


# ---------------------------------------------------------------------------
# Minimal client (used by the CLI and tests)
# ---------------------------------------------------------------------------

class DetectorClient:
    """Blocking client; relies on the ENDPOINT-before-PROBS reply order."""

    def __init__(self, host: str, port: int, n_streams: int, dim: int,
                 frame_rate_hz: float, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.n_streams = n_streams
        self.dim = dim
        self.sock.sendall(pack_message(
            MSG_HELLO, _HELLO.pack(n_streams, dim, frame_rate_hz)))
        msg_type, payload = recv_message(self.sock)
        if msg_type == MSG_ERROR:
            raise ProtocolError(payload.decode())
        if msg_type != MSG_READY:
            raise ProtocolError(f"expected READY, got type {msg_type}")

    def send_frame(self, frame_index: int, frames, sys_active: int = 0
                   ) -> tuple[np.ndarray, Optional[tuple[int, int, int]]]:
        """Send one frame; returns (probs, (kind, frame, time_ms) or None)."""
        if self.n_streams == 1:
            data = np.asarray(frames, dtype="<f4").tobytes()
        else:
            data = (np.asarray(frames[0], dtype="<f4").tobytes()
                    + np.asarray(frames[1], dtype="<f4").tobytes())
        payload = struct.pack("<I", frame_index) + data + bytes([sys_active])
        self.sock.sendall(pack_message(MSG_FRAME, payload))
        endpoint = None
        while True:
            msg_type, reply = recv_message(self.sock)
            if msg_type == MSG_ERROR:
                raise ProtocolError(reply.decode())
            if msg_type == MSG_ENDPOINT:
                kind, fidx, time_ms = _ENDPOINT.unpack(reply)
                endpoint = (kind, fidx, time_ms)
                continue
            if msg_type != MSG_PROBS:
                raise ProtocolError(f"expected PROBS, got type {msg_type}")
            (idx,) = struct.unpack_from("<I", reply, 0)
            if idx != frame_index:
                raise ProtocolError(f"out-of-order reply: sent {frame_index}, "
                                    f"got {idx}")
            probs = np.frombuffer(reply, dtype="<f4", count=4, offset=4).copy()
            return probs, endpoint

    def close(self) -> None:
        try:
            self.sock.sendall(pack_message(MSG_BYE))
        finally:
            self.sock.close()
