"""Wire protocol and the two interchangeable fabrics connecting sites.

Frames are length-prefixed: magic "FSIM", version u16, message type u16,
round u64, payload length u64, payload bytes; all integers little-endian.
Model parameters travel as 32-bit floats and are promoted to 64-bit on
receipt, so aggregation happens in f64 on both fabrics.

The in-process fabric is a seeded discrete-event scheduler delivering
messages in (tick, destination, sequence) order. The socket fabric speaks
the same frames over TCP with one handler thread per connection and all
aggregator state mutations funneled through a single queue. Both fabrics
drive the same service objects, so a seeded run produces identical ledgers
and consensus checkpoints on either.
"""

from __future__ import annotations

import enum
import heapq
import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import (
    BadMagicError,
    DuplicateSubmissionError,
    OversizedPayloadError,
    StaleRoundError,
    TruncatedFrameError,
    UnsupportedVersionError,
)
from .federation import Aggregator, Collaborator, DropSchedule
from .metrics import DscReport
from .tensors import ParamVector, fpv_bytes, fpv_from_bytes

__all__ = [
    "MAGIC",
    "PROTOCOL_VERSION",
    "DEFAULT_PAYLOAD_CAP",
    "MsgType",
    "WireMessage",
    "encode",
    "decode",
    "FrameReader",
    "AggregatorService",
    "CollaboratorService",
    "FabricSpec",
    "run_fabric",
    "run_socket_aggregator",
    "run_socket_collaborator",
]

MAGIC = b"FSIM"
PROTOCOL_VERSION = 1
DEFAULT_PAYLOAD_CAP = 256 * 1024 * 1024

_HEADER = struct.Struct("<4sHHQQ")
HEADER_SIZE = _HEADER.size  # 24 bytes

AGGREGATOR_ID = "agg"


class MsgType(enum.IntEnum):
    JOIN = 1
    JOIN_ACK = 2
    MODEL = 3
    UPDATE = 4
    VALIDATION = 5
    ROUND_DONE = 6
    BYE = 7
    ERROR = 255


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    round: int = 0
    payload: bytes = b""
    version: int = PROTOCOL_VERSION


def encode(msg: WireMessage, cap: int = DEFAULT_PAYLOAD_CAP) -> bytes:
    if len(msg.payload) > cap:
        raise OversizedPayloadError(f"payload of {len(msg.payload)} bytes exceeds cap {cap}")
    header = _HEADER.pack(MAGIC, msg.version, int(msg.msg_type), msg.round, len(msg.payload))
    return header + msg.payload


def decode(buf: bytes, cap: int = DEFAULT_PAYLOAD_CAP) -> WireMessage:
    """Parse exactly one frame; trailing bytes are an error."""
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrameError(f"frame of {len(buf)} bytes is shorter than the header")
    magic, version, msg_type, round_idx, payload_len = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersionError(f"version {version} not supported")
    if payload_len > cap:
        raise OversizedPayloadError(f"declared payload {payload_len} exceeds cap {cap}")
    if len(buf) != HEADER_SIZE + payload_len:
        raise TruncatedFrameError(
            f"frame declares {payload_len} payload bytes, buffer has {len(buf) - HEADER_SIZE}"
        )
    return WireMessage(msg_type=msg_type, round=round_idx, payload=bytes(buf[HEADER_SIZE:]), version=version)


class FrameReader:
    """Incremental frame splitter; byte-chunk boundaries never matter."""

    def __init__(self, cap: int = DEFAULT_PAYLOAD_CAP):
        self._buf = bytearray()
        self._cap = cap

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < HEADER_SIZE:
                break
            magic, version, msg_type, round_idx, payload_len = _HEADER.unpack_from(self._buf)
            if magic != MAGIC:
                raise BadMagicError(f"bad magic {bytes(magic)!r}")
            if version != PROTOCOL_VERSION:
                raise UnsupportedVersionError(f"version {version} not supported")
            if payload_len > self._cap:
                raise OversizedPayloadError(f"declared payload {payload_len} exceeds cap {self._cap}")
            total = HEADER_SIZE + payload_len
            if len(self._buf) < total:
                break
            payload = bytes(self._buf[HEADER_SIZE:total])
            del self._buf[:total]
            frames.append(WireMessage(msg_type=msg_type, round=round_idx, payload=payload, version=version))
        return frames


def _json_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def _update_payload(update: ParamVector, train_count: int) -> bytes:
    return struct.pack("<Q", train_count) + fpv_bytes(update, dtype="f4")


def _parse_update(payload: bytes) -> tuple[ParamVector, int]:
    (count,) = struct.unpack_from("<Q", payload)
    return fpv_from_bytes(payload[8:]), count


# ---------------------------------------------------------------------------
# Transport-agnostic services
# ---------------------------------------------------------------------------


class AggregatorService:
    """Round barrier over an Aggregator; speaks WireMessages to sites."""

    def __init__(self, aggregator: Aggregator, site_ids, total_rounds: int):
        self.aggregator = aggregator
        self.expected = sorted(site_ids)
        self.total_rounds = int(total_rounds)
        self.joined: set[str] = set()
        self.live: set[str] = set()
        self.done: set[str] = set()
        self.finished = False

    def _broadcast_model(self) -> list[tuple[str, WireMessage]]:
        round_idx = self.aggregator.start_round()
        self.done = set()
        payload = fpv_bytes(self.aggregator.consensus, dtype="f4")
        msg = WireMessage(MsgType.MODEL, round=round_idx, payload=payload)
        return [(site, msg) for site in sorted(self.live)]

    def _maybe_close_round(self) -> list[tuple[str, WireMessage]]:
        if not self.live or not self.done >= self.live:
            return []
        self.aggregator.close_round()
        if self.aggregator.round >= self.total_rounds:
            self.finished = True
            bye = WireMessage(MsgType.BYE, round=self.aggregator.round)
            return [(site, bye) for site in sorted(self.live)]
        return self._broadcast_model()

    def handle(self, src: str | None, msg: WireMessage) -> list[tuple[str, WireMessage]]:
        try:
            return self._dispatch(src, msg)
        except (StaleRoundError, DuplicateSubmissionError) as exc:
            # protocol-level guard trip: reply ERROR, connection survives
            reply = WireMessage(MsgType.ERROR, round=msg.round, payload=_json_payload({"reason": str(exc)}))
            return [(src, reply)] if src else []

    def _dispatch(self, src, msg):
        mtype = msg.msg_type
        if mtype == MsgType.JOIN:
            info = json.loads(msg.payload.decode("utf-8"))
            site = info["site_id"]
            self.joined.add(site)
            self.live.add(site)
            out = [(site, WireMessage(MsgType.JOIN_ACK, payload=_json_payload({"site_id": site, "rounds": self.total_rounds})))]
            if self.joined >= set(self.expected) and self.aggregator.round == 0:
                out.extend(self._broadcast_model())
            return out
        if mtype == MsgType.VALIDATION:
            info = json.loads(msg.payload.decode("utf-8"))
            report = DscReport(**info["dsc"])
            per_case = tuple((cid, DscReport(**rep)) for cid, rep in info.get("per_case", []))
            self.aggregator.submit_validation(src, msg.round, report, info["val_count"], per_case)
            if "train_loss" in info:
                self.aggregator.record_loss(src, info["train_loss"])
            return []
        if mtype == MsgType.UPDATE:
            update, train_count = _parse_update(msg.payload)
            self.aggregator.submit_update(src, msg.round, update, train_count)
            return []
        if mtype == MsgType.ROUND_DONE:
            info = json.loads(msg.payload.decode("utf-8"))
            if info.get("dropped"):
                self.aggregator.mark_dropped(src, msg.round)
            self.done.add(src)
            return self._maybe_close_round()
        if mtype == MsgType.BYE:
            self.live.discard(src)
            return []
        return [(src, WireMessage(MsgType.ERROR, round=msg.round, payload=_json_payload({"reason": f"unknown message type {mtype}"})))]

    def handle_disconnect(self, site: str) -> list[tuple[str, WireMessage]]:
        """A vanished site counts as dropped for the open round."""
        self.live.discard(site)
        if self.aggregator.round > 0 and not self.finished:
            try:
                self.aggregator.mark_dropped(site, self.aggregator.round)
            except StaleRoundError:
                pass
            self.done.discard(site)
            return self._maybe_close_round()
        return []


class CollaboratorService:
    """Wraps a Collaborator behind the wire protocol."""

    def __init__(self, collaborator: Collaborator, drop_schedule: DropSchedule):
        self.collaborator = collaborator
        self.drop_schedule = drop_schedule
        self.closed = False
        self.errors: list[str] = []

    @property
    def site_id(self) -> str:
        return self.collaborator.site_id

    def hello(self) -> list[tuple[str, WireMessage]]:
        payload = _json_payload({"site_id": self.site_id})
        return [(AGGREGATOR_ID, WireMessage(MsgType.JOIN, payload=payload))]

    def handle(self, msg: WireMessage) -> list[tuple[str, WireMessage]]:
        mtype = msg.msg_type
        if mtype == MsgType.JOIN_ACK:
            return []
        if mtype == MsgType.MODEL:
            round_idx = msg.round
            if self.drop_schedule.dropped(self.site_id, round_idx):
                self.collaborator.mark_dropped()
                done = WireMessage(MsgType.ROUND_DONE, round=round_idx, payload=_json_payload({"dropped": True}))
                return [(AGGREGATOR_ID, done)]
            consensus = fpv_from_bytes(msg.payload)
            sub = self.collaborator.local_round(round_idx, consensus)
            self.collaborator.finish_round()
            validation = WireMessage(
                MsgType.VALIDATION,
                round=round_idx,
                payload=_json_payload(
                    {
                        "val_count": sub.val_count,
                        "dsc": sub.report.as_dict(),
                        "per_case": [[cid, rep.as_dict()] for cid, rep in sub.per_case],
                        "train_loss": sub.train_loss,
                    }
                ),
            )
            update = WireMessage(MsgType.UPDATE, round=round_idx, payload=_update_payload(sub.update, sub.train_count))
            done = WireMessage(MsgType.ROUND_DONE, round=round_idx, payload=_json_payload({"dropped": False}))
            return [(AGGREGATOR_ID, m) for m in (validation, update, done)]
        if mtype == MsgType.BYE:
            self.closed = True
            return []
        if mtype == MsgType.ERROR:
            self.errors.append(msg.payload.decode("utf-8", errors="replace"))
            return []
        return []


# ---------------------------------------------------------------------------
# Fabrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FabricSpec:
    mode: str = "in_process"  # or "socket"
    latency: dict = field(default_factory=dict)  # site_id -> delay ticks (sim only)
    host: str = "127.0.0.1"
    port: int = 0


@dataclass(frozen=True)
class FabricEvent:
    tick: int
    src: str
    dst: str
    msg_type: int
    round: int


def run_fabric(agg_service: AggregatorService, collab_services, fabric: FabricSpec) -> list[FabricEvent]:
    """Run a full federation over the chosen fabric; returns the event log."""
    services = {svc.site_id: svc for svc in collab_services}
    if fabric.mode == "in_process":
        return _run_in_process(agg_service, services, fabric)
    if fabric.mode == "socket":
        return _run_socket(agg_service, services, fabric)
    raise ValueError(f"unknown fabric mode {fabric.mode!r}")


def _run_in_process(agg_service, services, fabric: FabricSpec) -> list[FabricEvent]:
    """Deterministic discrete-event delivery in (tick, destination, seq) order."""
    heap: list[tuple[int, str, int, str, bytes]] = []
    seq = 0
    log: list[FabricEvent] = []

    def delay(site: str) -> int:
        return int(fabric.latency.get(site, 0))

    def push(tick: int, src: str, dst: str, msg: WireMessage):
        nonlocal seq
        wire = encode(msg)
        heapq.heappush(heap, (tick, dst, seq, src, wire))
        seq += 1

    for site in sorted(services):
        for dst, msg in services[site].hello():
            push(delay(site), site, dst, msg)

    while heap:
        tick, dst, _, src, wire = heapq.heappop(heap)
        msg = decode(wire)
        log.append(FabricEvent(tick=tick, src=src, dst=dst, msg_type=int(msg.msg_type), round=msg.round))
        if dst == AGGREGATOR_ID:
            for out_dst, out in agg_service.handle(src, msg):
                push(tick + delay(out_dst), AGGREGATOR_ID, out_dst, out)
        else:
            for out_dst, out in services[dst].handle(msg):
                push(tick + delay(dst), dst, out_dst, out)
    return log


def _send_frame(sock: socket.socket, lock: threading.Lock, msg: WireMessage) -> None:
    data = encode(msg)
    with lock:
        sock.sendall(data)


def _run_socket(agg_service, services, fabric: FabricSpec) -> list[FabricEvent]:
    """Same services over real TCP connections on localhost."""
    inbox: queue.Queue = queue.Queue()
    server = socket.create_server((fabric.host, fabric.port))
    host, port = server.getsockname()
    log: list[FabricEvent] = []
    conns: dict[str, tuple[socket.socket, threading.Lock]] = {}
    n_sites = len(services)

    def reader(conn: socket.socket):
        frames = FrameReader()
        site = None
        try:
            while True:
                data = conn.recv(65536)
                if not data:
                    break
                for msg in frames.feed(data):
                    if msg.msg_type == MsgType.JOIN:
                        site = json.loads(msg.payload.decode("utf-8"))["site_id"]
                        lock = threading.Lock()
                        conns[site] = (conn, lock)
                    inbox.put(("msg", site, msg))
        except OSError:
            pass
        inbox.put(("gone", site, None))

    def acceptor():
        accepted = 0
        while accepted < n_sites:
            try:
                conn, _ = server.accept()
            except OSError:
                return
            threading.Thread(target=reader, args=(conn,), daemon=True).start()
            accepted += 1

    accept_thread = threading.Thread(target=acceptor, daemon=True)
    accept_thread.start()

    clients = [
        threading.Thread(target=run_socket_collaborator, args=(svc, host, port), daemon=True)
        for svc in services.values()
    ]
    for t in clients:
        t.start()

    # Single-threaded dispatch loop: the serialized command queue.
    gone: set[str] = set()
    while not (agg_service.finished and agg_service.done >= agg_service.live):
        kind, site, msg = inbox.get()
        if kind == "gone":
            if site is not None and site not in gone:
                gone.add(site)
                for dst, out in agg_service.handle_disconnect(site):
                    if dst in conns and dst not in gone:
                        _send_frame(*conns[dst], out)
            if agg_service.finished or (gone >= set(services) and agg_service.aggregator.round == 0):
                break
            continue
        log.append(FabricEvent(tick=len(log), src=site or "?", dst=AGGREGATOR_ID, msg_type=int(msg.msg_type), round=msg.round))
        for dst, out in agg_service.handle(site, msg):
            if dst in conns and dst not in gone:
                try:
                    _send_frame(*conns[dst], out)
                except OSError:
                    pass
        if agg_service.finished:
            break

    for t in clients:
        t.join(timeout=30)
    for conn, _ in conns.values():
        try:
            conn.close()
        except OSError:
            pass
    server.close()
    return log


def run_socket_collaborator(service: CollaboratorService, host: str, port: int) -> None:
    """Connect, JOIN, then serve MODEL broadcasts until BYE."""
    with socket.create_connection((host, port)) as sock:
        lock = threading.Lock()
        for _, msg in service.hello():
            _send_frame(sock, lock, msg)
        frames = FrameReader()
        while not service.closed:
            data = sock.recv(65536)
            if not data:
                break
            for msg in frames.feed(data):
                for _, out in service.handle(msg):
                    _send_frame(sock, lock, out)
                if service.closed:
                    break


def run_socket_aggregator(agg_service: AggregatorService, host: str, port: int):
    """Blocking server entry point for the standalone aggregator process."""
    spec = FabricSpec(mode="socket", host=host, port=port)
    services: dict = {}
    # The standalone server does not spawn clients; reuse the socket loop with
    # external collaborators by listening for exactly the expected sites.
    inbox: queue.Queue = queue.Queue()
    server = socket.create_server((host, port))
    conns: dict[str, tuple[socket.socket, threading.Lock]] = {}
    expected = set(agg_service.expected)

    def reader(conn):
        frames = FrameReader()
        site = None
        try:
            while True:
                data = conn.recv(65536)
                if not data:
                    break
                for msg in frames.feed(data):
                    if msg.msg_type == MsgType.JOIN:
                        site = json.loads(msg.payload.decode("utf-8"))["site_id"]
                        conns[site] = (conn, threading.Lock())
                    inbox.put(("msg", site, msg))
        except OSError:
            pass
        inbox.put(("gone", site, None))

    def acceptor():
        while not agg_service.finished:
            try:
                conn, _ = server.accept()
            except OSError:
                return
            threading.Thread(target=reader, args=(conn,), daemon=True).start()

    threading.Thread(target=acceptor, daemon=True).start()
    gone: set[str] = set()
    try:
        while not agg_service.finished:
            kind, site, msg = inbox.get()
            if kind == "gone":
                if site is not None and site not in gone:
                    gone.add(site)
                    for dst, out in agg_service.handle_disconnect(site):
                        if dst in conns and dst not in gone:
                            _send_frame(*conns[dst], out)
                if gone >= expected:
                    break
                continue
            for dst, out in agg_service.handle(site, msg):
                if dst in conns and dst not in gone:
                    try:
                        _send_frame(*conns[dst], out)
                    except OSError:
                        pass
    finally:
        for conn, _ in conns.values():
            try:
                conn.close()
            except OSError:
                pass
        server.close()
    return spec
