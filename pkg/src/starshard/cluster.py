"""Star-topology collectives over pluggable transports.

Rank 0 is the hub: workers connect only to it, push partial tensors, and pull
the aggregated result back. Aggregation always starts from rank 0's own
partial and adds pushes in ascending rank order (never arrival order), so
repeated runs produce bit-identical sums.

Two transports share the collective code: an in-process loopback that moves
encoded frames through queues (optionally with synthetic link delay, for
benchmarks and deterministic tests) and a TCP transport that moves the same
bytes over sockets, one process per rank.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .wire import (
    MsgType,
    Phase,
    ProtocolError,
    WireFrame,
    decode_frame,
    encode_frame,
    hello_frame,
    shutdown_frame,
)

DEFAULT_TIMEOUT_S = 30.0


@dataclass(frozen=True)
class LinkDelayModel:
    """Synthetic per-frame delay: fixed link latency plus serialization time."""

    latency_ms: float = 0.0
    bandwidth_mbps: float | None = None

    def delay_s(self, nbytes: int) -> float:
        delay = self.latency_ms / 1e3
        if self.bandwidth_mbps:
            delay += nbytes * 8.0 / (self.bandwidth_mbps * 1e6)
        return delay


@dataclass(frozen=True)
class FrameRecord:
    src: int
    dst: int
    msg_type: MsgType
    dims: tuple[int, ...]


class TrafficCapture:
    """Thread-safe log of every frame sent anywhere in a cluster."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: list[FrameRecord] = []

    def record(self, rec: FrameRecord) -> None:
        with self._lock:
            self._records.append(rec)

    @property
    def frames(self) -> list[FrameRecord]:
        with self._lock:
            return list(self._records)


@dataclass
class CollectiveCounters:
    rounds: int = 0
    payload_bytes: int = 0


class _Mailbox:
    """Inbox of raw frames with optional not-before delivery times."""

    def __init__(self) -> None:
        self._q: queue.Queue = queue.Queue()

    def put(self, deliver_at: float, raw: bytes | None) -> None:
        self._q.put((deliver_at, raw))

    def get(self, timeout: float, peer: int) -> bytes:
        try:
            deliver_at, raw = self._q.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(
                f"collective timed out after {timeout:.1f}s waiting for rank {peer}"
            ) from None
        if raw is None:
            raise ProtocolError(f"rank {peer} disconnected")
        wait = deliver_at - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        return raw


@dataclass
class _PeerLink:
    send_raw: Callable[[bytes], None]
    mailbox: _Mailbox
    close: Callable[[], None] = lambda: None


class ClusterHandle:
    """One rank's endpoints in a star cluster."""

    def __init__(
        self,
        rank: int,
        size: int,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        capture: TrafficCapture | None = None,
    ) -> None:
        self.rank = rank
        self.size = size
        self.timeout_s = timeout_s
        self.capture = capture
        self.counters = CollectiveCounters()
        self._peers: dict[int, _PeerLink] = {}

    def attach_peer(self, peer: int, link: _PeerLink) -> None:
        self._peers[peer] = link

    def send_frame(self, peer: int, frame: WireFrame) -> None:
        if self.capture is not None:
            self.capture.record(
                FrameRecord(self.rank, peer, frame.msg_type, tuple(frame.payload.shape))
            )
        self._peers[peer].send_raw(encode_frame(frame))

    def recv_frame(self, peer: int) -> WireFrame:
        return decode_frame(self._peers[peer].mailbox.get(self.timeout_s, peer))

    def close(self) -> None:
        for link in self._peers.values():
            link.close()


def _check_pull(frame: WireFrame, layer: int, phase: Phase) -> np.ndarray:
    if frame.msg_type != MsgType.ALLREDUCE_PULL:
        raise ProtocolError(f"expected allreduce result, got {frame.msg_type.name}")
    if frame.layer != layer or frame.phase != phase:
        raise ProtocolError(
            f"allreduce tag mismatch: got layer {frame.layer}/{frame.phase.name}, "
            f"expected {layer}/{phase.name}"
        )
    return frame.payload


def _gather_partials(
    cluster: ClusterHandle,
    local: np.ndarray,
    layer: int,
    phase: Phase,
    expected_type: MsgType,
) -> np.ndarray:
    """Rank-0 side: sum own partial plus pushes, in ascending rank order."""
    total = local.copy()
    for peer in range(1, cluster.size):
        frame = cluster.recv_frame(peer)
        if frame.msg_type != expected_type:
            raise ProtocolError(
                f"rank {peer} sent {frame.msg_type.name} during {expected_type.name}"
            )
        if frame.layer != layer or frame.phase != phase:
            raise ProtocolError(
                f"rank {peer} tag mismatch: got layer {frame.layer}/{frame.phase.name}, "
                f"expected {layer}/{phase.name}"
            )
        if frame.payload.shape != local.shape:
            raise ProtocolError(
                f"rank {peer} shape mismatch: got {frame.payload.shape}, "
                f"expected {local.shape}"
            )
        total += frame.payload
    return total


def all_reduce_star(
    cluster: ClusterHandle, local: np.ndarray, layer: int, phase: Phase
) -> np.ndarray:
    """Sum ``local`` across all ranks; every rank returns the same tensor.

    Workers push to rank 0 and pull the result back (two link traversals per
    worker). The per-round payload byte counter records one direction of one
    rank's tensor, i.e. 4 * seq * hidden during decoding.
    """
    local = np.ascontiguousarray(local, dtype=np.float32)
    cluster.counters.rounds += 1
    cluster.counters.payload_bytes += local.nbytes
    if cluster.size == 1:
        return local
    if cluster.rank == 0:
        total = _gather_partials(cluster, local, layer, phase, MsgType.ALLREDUCE_PUSH)
        result = WireFrame(MsgType.ALLREDUCE_PULL, layer, phase, total)
        for peer in range(1, cluster.size):
            cluster.send_frame(peer, result)
        return total
    cluster.send_frame(0, WireFrame(MsgType.ALLREDUCE_PUSH, layer, phase, local))
    return _check_pull(cluster.recv_frame(0), layer, phase)


def reduce_to_master(
    cluster: ClusterHandle, local: np.ndarray, layer: int = 0, phase: Phase = Phase.FINAL
) -> np.ndarray | None:
    """Sum ``local`` onto rank 0 only; workers return None (no pull phase)."""
    local = np.ascontiguousarray(local, dtype=np.float32)
    cluster.counters.rounds += 1
    cluster.counters.payload_bytes += local.nbytes
    if cluster.size == 1:
        return local
    if cluster.rank == 0:
        return _gather_partials(cluster, local, layer, phase, MsgType.REDUCE)
    cluster.send_frame(0, WireFrame(MsgType.REDUCE, layer, phase, local))
    return None


def broadcast(cluster: ClusterHandle, payload: np.ndarray, cache_position: int = 0) -> None:
    """Rank-0 side of a broadcast; returns once every send has completed.

    Workers receive the identical frame via :func:`receive_from_master`.
    """
    if cluster.rank != 0:
        raise ProtocolError("broadcast must be initiated by rank 0")
    payload = np.ascontiguousarray(payload, dtype=np.float32)
    frame = WireFrame(MsgType.BROADCAST, cache_position, Phase.FINAL, payload)
    for peer in range(1, cluster.size):
        cluster.send_frame(peer, frame)


def receive_from_master(cluster: ClusterHandle) -> WireFrame:
    """Worker side: next broadcast or shutdown frame from rank 0."""
    if cluster.rank == 0:
        raise ProtocolError("rank 0 does not receive broadcasts")
    frame = cluster.recv_frame(0)
    if frame.msg_type not in (MsgType.BROADCAST, MsgType.SHUTDOWN):
        raise ProtocolError(f"unexpected {frame.msg_type.name} while idle")
    return frame


def send_shutdown(cluster: ClusterHandle) -> None:
    if cluster.rank != 0:
        raise ProtocolError("shutdown must be initiated by rank 0")
    for peer in range(1, cluster.size):
        cluster.send_frame(peer, shutdown_frame())


# ---------------------------------------------------------------------------
# Loopback transport
# ---------------------------------------------------------------------------


def loopback_cluster(
    n: int,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    delay: LinkDelayModel | None = None,
    capture: TrafficCapture | None = None,
) -> list[ClusterHandle]:
    """In-process star cluster with the same semantics as the TCP transport.

    Frames are fully encoded and decoded on the way through, so captures and
    byte counters see exactly what sockets would carry. ``delay`` holds each
    frame back by latency plus payload serialization time.
    """
    handles = [ClusterHandle(rank, n, timeout_s, capture) for rank in range(n)]

    def sender(dst_mailbox: _Mailbox) -> Callable[[bytes], None]:
        def send_raw(raw: bytes) -> None:
            deliver_at = time.monotonic() + (delay.delay_s(len(raw)) if delay else 0.0)
            # Mailboxes carry frame bodies; drop the u32 length prefix that
            # the stream transport needs.
            dst_mailbox.put(deliver_at, raw[4:])

        return send_raw

    for worker in range(1, n):
        to_master = _Mailbox()
        to_worker = _Mailbox()
        handles[0].attach_peer(worker, _PeerLink(sender(to_worker), to_master))
        handles[worker].attach_peer(0, _PeerLink(sender(to_master), to_worker))
    return handles


# ---------------------------------------------------------------------------
# TCP transport
# ---------------------------------------------------------------------------


def _read_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    while count:
        chunk = sock.recv(count)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        count -= len(chunk)
    return b"".join(chunks)


def _read_frame_raw(sock: socket.socket) -> bytes:
    (length,) = struct.unpack("<I", _read_exact(sock, 4))
    return _read_exact(sock, length)


def _socket_link(sock: socket.socket, peer: int) -> _PeerLink:
    mailbox = _Mailbox()
    send_lock = threading.Lock()

    def reader() -> None:
        try:
            while True:
                mailbox.put(0.0, _read_frame_raw(sock))
        except (ConnectionError, OSError):
            mailbox.put(0.0, None)

    thread = threading.Thread(target=reader, name=f"reader-rank{peer}", daemon=True)
    thread.start()

    def send_raw(raw: bytes) -> None:
        with send_lock:
            try:
                sock.sendall(raw)
            except OSError as exc:
                raise ProtocolError(f"send to rank {peer} failed: {exc}") from exc

    def close() -> None:
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()

    return _PeerLink(send_raw, mailbox, close)


def _verify_hello(frame: WireFrame, digest: bytes, peer_label: str) -> int:
    if frame.msg_type != MsgType.HELLO:
        raise ProtocolError(f"{peer_label} did not start with a hello frame")
    if frame.payload.tobytes() != digest:
        raise ProtocolError(f"config digest mismatch from {peer_label}")
    return frame.layer


def tcp_master_cluster(
    host: str,
    port: int,
    size: int,
    digest: bytes,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    accept_timeout_s: float = 60.0,
) -> ClusterHandle:
    """Bind, accept ``size - 1`` workers, and exchange hello frames."""
    cluster = ClusterHandle(0, size, timeout_s)
    if size == 1:
        return cluster
    server = socket.create_server((host, port))
    server.settimeout(accept_timeout_s)
    try:
        pending = size - 1
        while pending:
            conn, _ = server.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(accept_timeout_s)
            try:
                frame = decode_frame(_read_frame_raw(conn))
            except ConnectionError:
                # Port probe or dropped peer before any hello: keep accepting.
                conn.close()
                continue
            rank = _verify_hello(frame, digest, "connecting worker")
            if rank < 1 or rank >= size or rank in cluster._peers:
                raise ProtocolError(f"unexpected worker rank {rank}")
            conn.sendall(encode_frame(hello_frame(0, digest)))
            conn.settimeout(None)
            cluster.attach_peer(rank, _socket_link(conn, rank))
            pending -= 1
    except socket.timeout:
        raise ProtocolError(
            f"timed out accepting workers; {pending} of {size - 1} missing"
        ) from None
    finally:
        server.close()
    return cluster


def tcp_worker_cluster(
    host: str,
    port: int,
    rank: int,
    size: int,
    digest: bytes,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    connect_timeout_s: float = 30.0,
) -> ClusterHandle:
    """Connect to the master (with retries) and exchange hello frames."""
    if rank < 1 or rank >= size:
        raise ProtocolError(f"worker rank must be in 1..{size - 1}, got {rank}")
    deadline = time.monotonic() + connect_timeout_s
    sock: socket.socket | None = None
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout_s)
            break
        except OSError:
            if time.monotonic() >= deadline:
                raise ProtocolError(f"could not reach master at {host}:{port}") from None
            time.sleep(0.1)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.sendall(encode_frame(hello_frame(rank, digest)))
    sock.settimeout(connect_timeout_s)
    try:
        frame = decode_frame(_read_frame_raw(sock))
    except (ConnectionError, socket.timeout) as exc:
        raise ProtocolError(f"master rejected the handshake: {exc}") from None
    _verify_hello(frame, digest, "master")
    sock.settimeout(None)
    cluster = ClusterHandle(rank, size, timeout_s)
    cluster.attach_peer(0, _socket_link(sock, 0))
    return cluster
