"""Request/reply messages between party nodes and the controller.

Frames are a 4-byte big-endian length followed by a UTF-8 JSON object
``{"kind", "id", "from", "body"}``.  Two transports share the same node
handlers: :class:`SimNet`, a deterministic in-process network with fault
injection, and a threaded TCP server/client pair.
"""

from __future__ import annotations

import collections
import itertools
import json
import logging
import random
import socket
import socketserver
import struct
import threading
from collections.abc import Callable
from dataclasses import dataclass, field

from .errors import (
    ERRORS_BY_CODE,
    BadPayload,
    FederationError,
    FrameError,
    TransportError,
    UnknownKind,
)

logger = logging.getLogger(__name__)

KINDS = (
    "RegisterParty", "RegisterShared", "Locate", "Authorize", "TransferOwner",
    "PropagateNotify", "Replicate", "FetchEntities", "Admin", "Ack", "Error",
)
REPLY_KINDS = ("Ack", "Error")
MAX_FRAME = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 10.0
_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class Message:
    kind: str
    id: int
    sender: str
    body: dict = field(default_factory=dict)

    @property
    def is_reply(self) -> bool:
        return self.kind in REPLY_KINDS


def encode(msg: Message) -> bytes:
    if msg.kind not in KINDS:
        raise UnknownKind(f"unknown message kind {msg.kind!r}")
    payload = json.dumps({"kind": msg.kind, "id": msg.id, "from": msg.sender, "body": msg.body},
                         ensure_ascii=True, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise FrameError(f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(payload)) + payload


def decode(data: bytes) -> Message:
    if len(data) < _LEN.size:
        raise FrameError("truncated frame header")
    (length,) = _LEN.unpack_from(data)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    if len(data) - _LEN.size != length:
        raise FrameError(f"frame declares {length} bytes, {len(data) - _LEN.size} present")
    return decode_payload(data[_LEN.size:])


def decode_payload(payload: bytes) -> Message:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadPayload(f"malformed JSON frame: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != {"kind", "id", "from", "body"}:
        raise BadPayload("frame must be an object with fields kind, id, from, body")
    kind, mid, sender, body = obj["kind"], obj["id"], obj["from"], obj["body"]
    if not isinstance(mid, int) or isinstance(mid, bool) or not isinstance(sender, str) \
            or not isinstance(body, dict) or not isinstance(kind, str):
        raise BadPayload("bad field types in frame")
    if kind not in KINDS:
        raise UnknownKind(f"unknown message kind {kind!r}")
    return Message(kind, mid, sender, body)


def error_body(exc: FederationError) -> dict:
    return {"code": exc.code, "message": exc.message}


def raise_for_reply(reply: Message) -> dict:
    """Return an Ack body, or re-raise the remote error locally."""
    if reply.kind == "Error":
        cls = ERRORS_BY_CODE.get(reply.body.get("code"), FederationError)
        raise cls(reply.body.get("message", ""))
    return reply.body


def read_frame(stream) -> bytes | None:
    """Read one frame from a binary file-like object; None on clean EOF."""
    header = stream.read(_LEN.size)
    if not header:
        return None
    if len(header) < _LEN.size:
        raise FrameError("truncated frame header")
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    payload = stream.read(length)
    if len(payload) < length:
        raise FrameError("truncated frame body")
    return header + payload


# -- request handling ---------------------------------------------------------

class Service:
    """Base for nodes: dispatches requests to ``on_<Kind>`` methods.

    Replies are cached per (sender, request id) so redelivered requests get
    the original answer without running the handler twice.
    """

    name = "node"
    reply_cache_size = 4096

    def __init__(self):
        self._seen: collections.OrderedDict[tuple[str, int], Message] = collections.OrderedDict()
        self._seen_lock = threading.Lock()

    def respond(self, msg: Message) -> Message:
        key = (msg.sender, msg.id)
        with self._seen_lock:
            cached = self._seen.get(key)
        if cached is not None:
            return cached
        try:
            handler = getattr(self, f"on_{msg.kind}", None) if msg.kind not in REPLY_KINDS else None
            if handler is None:
                raise UnknownKind(f"{self.name} does not handle {msg.kind}")
            reply = Message("Ack", msg.id, self.name, handler(msg) or {})
        except FederationError as exc:
            reply = Message("Error", msg.id, self.name, error_body(exc))
        except (KeyError, TypeError, ValueError) as exc:
            logger.debug("bad payload from %s: %r", msg.sender, exc)
            reply = Message("Error", msg.id, self.name, {"code": "BAD_PAYLOAD", "message": str(exc)})
        with self._seen_lock:
            self._seen[key] = reply
            while len(self._seen) > self.reply_cache_size:
                self._seen.popitem(last=False)
        return reply


class Endpoint:
    """What a node uses to talk to others."""

    name: str

    def call(self, dest: str, kind: str, body: dict) -> dict:
        raise NotImplementedError

    def send(self, dest: str, kind: str, body: dict, on_reply: Callable[[Message], None] | None = None) -> None:
        raise NotImplementedError

    def learn(self, addresses: dict[str, str]) -> None:
        """Record peer addresses (only meaningful for sockets)."""


# -- simulated network --------------------------------------------------------

@dataclass
class _Envelope:
    seq: int
    src: str
    dst: str
    frame: bytes


class SimNet:
    """Deterministic step-driven network.

    Each ordered (sender, receiver) pair has a FIFO queue.  The ``fifo``
    policy always delivers the oldest pending message; ``random`` picks a
    non-empty queue with a seeded RNG.  Dropped requests are re-sent when
    the network goes idle without their reply; duplicated messages rely on
    the receivers' reply cache.
    """

    def __init__(self, policy: str = "fifo", seed: int = 0, drop_rate: float = 0.0,
                 duplicate_rate: float = 0.0, max_retries: int = 50):
        if policy not in ("fifo", "random"):
            raise ValueError("policy must be 'fifo' or 'random'")
        self.policy = policy
        self.rng = random.Random(seed)
        self.drop_rate = drop_rate
        self.duplicate_rate = duplicate_rate
        self.max_retries = max_retries
        self.nodes: dict[str, Service] = {}
        self.queues: dict[tuple[str, str], collections.deque[_Envelope]] = {}
        self.clock = 0
        self.trace: list[tuple[int, str, str, str, int, str]] = []
        self._seq = itertools.count()
        self._ids: dict[str, itertools.count] = {}
        self._outstanding: dict[tuple[str, int], tuple[str, Message, int]] = {}
        self._replies: dict[tuple[str, int], Message] = {}
        self._callbacks: dict[tuple[str, int], Callable[[Message], None]] = {}
        self._waiting: set[tuple[str, int]] = set()

    def register(self, service: Service) -> SimEndpoint:
        self.nodes[service.name] = service
        return self.endpoint(service.name)

    def endpoint(self, name: str) -> SimEndpoint:
        return SimEndpoint(self, name)

    def next_id(self, sender: str) -> int:
        counter = self._ids.setdefault(sender, itertools.count(1))
        return next(counter)

    # sending
    def _enqueue(self, src: str, dst: str, msg: Message) -> None:
        frame = encode(msg)
        if self.drop_rate and self.rng.random() < self.drop_rate:
            self.trace.append((self.clock, src, dst, msg.kind, msg.id, "drop"))
            return
        copies = 2 if self.duplicate_rate and self.rng.random() < self.duplicate_rate else 1
        q = self.queues.setdefault((src, dst), collections.deque())
        for _ in range(copies):
            q.append(_Envelope(next(self._seq), src, dst, frame))
        if copies == 2:
            self.trace.append((self.clock, src, dst, msg.kind, msg.id, "dup"))

    def send(self, src: str, dst: str, kind: str, body: dict,
             on_reply: Callable[[Message], None] | None = None) -> int:
        if dst not in self.nodes:
            raise TransportError(f"no node named {dst!r}")
        msg = Message(kind, self.next_id(src), src, body)
        self._outstanding[(src, msg.id)] = (dst, msg, 0)
        if on_reply is not None:
            self._callbacks[(src, msg.id)] = on_reply
        self._enqueue(src, dst, msg)
        return msg.id

    def call(self, src: str, dst: str, kind: str, body: dict) -> dict:
        """Send a request and pump the network until its reply arrives."""
        if dst not in self.nodes:
            raise TransportError(f"no node named {dst!r}")
        mid = self.next_id(src)
        key = (src, mid)
        self._waiting.add(key)
        msg = Message(kind, mid, src, body)
        self._outstanding[key] = (dst, msg, 0)
        self._enqueue(src, dst, msg)
        while key not in self._replies:
            if self.step() is None:
                if key not in self._outstanding:
                    break
                self._retry_outstanding()
        self._waiting.discard(key)
        reply = self._replies.pop(key, None)
        if reply is None:
            raise TransportError(f"no reply from {dst} to {kind} #{mid}")
        return raise_for_reply(reply)

    def _retry_outstanding(self) -> None:
        if not self._outstanding:
            return
        for key in sorted(self._outstanding):
            dst, msg, tries = self._outstanding[key]
            if tries >= self.max_retries:
                del self._outstanding[key]
                self._callbacks.pop(key, None)
                self.trace.append((self.clock, msg.sender, dst, msg.kind, msg.id, "gave-up"))
                continue
            self._outstanding[key] = (dst, msg, tries + 1)
            self.trace.append((self.clock, msg.sender, dst, msg.kind, msg.id, "retry"))
            self._enqueue(msg.sender, dst, msg)

    # delivery
    def pending(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def _pick(self) -> _Envelope | None:
        live = [k for k, q in self.queues.items() if q]
        if not live:
            return None
        if self.policy == "fifo":
            key = min(live, key=lambda k: self.queues[k][0].seq)
        else:
            key = self.rng.choice(sorted(live))
        return self.queues[key].popleft()

    def step(self) -> Message | None:
        env = self._pick()
        if env is None:
            return None
        self.clock += 1
        msg = decode(env.frame)
        self.trace.append((self.clock, env.src, env.dst, msg.kind, msg.id, "deliver"))
        if msg.is_reply:
            key = (env.dst, msg.id)
            if key in self._outstanding:
                del self._outstanding[key]
                cb = self._callbacks.pop(key, None)
                if key in self._waiting:
                    self._replies[key] = msg
                elif cb is not None:
                    cb(msg)
        else:
            reply = self.nodes[env.dst].respond(msg)
            self._enqueue(env.dst, env.src, reply)
        return msg

    def deliver(self, steps: int) -> list[Message]:
        out = []
        for _ in range(steps):
            msg = self.step()
            if msg is None:
                break
            out.append(msg)
        return out

    def run_until_idle(self, max_steps: int = 10_000_000) -> int:
        """Deliver until nothing is queued and no request awaits a reply."""
        n = 0
        while n < max_steps:
            if self.step() is None:
                if not self._outstanding:
                    break
                self._retry_outstanding()
                continue
            n += 1
        return n


def sim_deliver(net: SimNet, steps: int) -> list[Message]:
    return net.deliver(steps)


class SimEndpoint(Endpoint):
    def __init__(self, net: SimNet, name: str):
        self.net = net
        self.name = name

    def call(self, dest: str, kind: str, body: dict) -> dict:
        return self.net.call(self.name, dest, kind, body)

    def send(self, dest: str, kind: str, body: dict, on_reply=None) -> None:
        self.net.send(self.name, dest, kind, body, on_reply)


# -- sockets ------------------------------------------------------------------

def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: Service = self.server.service  # type: ignore[attr-defined]
        while True:
            try:
                frame = read_frame(self.rfile)
            except FrameError as exc:
                logger.warning("dropping connection: %s", exc)
                return
            if frame is None:
                return
            try:
                msg = decode(frame)
            except FederationError as exc:
                reply = Message("Error", 0, service.name, error_body(exc))
            except FrameError as exc:
                reply = Message("Error", 0, service.name, {"code": "BAD_PAYLOAD", "message": str(exc)})
            else:
                reply = service.respond(msg)
            self.wfile.write(encode(reply))
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SocketServer:
    """Serve a :class:`Service` over TCP, one thread per connection."""

    def __init__(self, service: Service, address: str = "127.0.0.1:0"):
        self.service = service
        self._server = _Server(parse_address(address), _Handler)
        self._server.service = service  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> SocketServer:
        self._thread = threading.Thread(target=self._server.serve_forever, name=f"serve-{self.service.name}",
                                        daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class SocketEndpoint(Endpoint):
    """Client side: one persistent connection per destination, requests serialized on it."""

    def __init__(self, name: str, addresses: dict[str, str] | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.name = name
        self.addresses = dict(addresses or {})
        self.timeout = timeout
        self._conns: dict[str, tuple[socket.socket, object]] = {}
        self._locks: dict[str, threading.Lock] = collections.defaultdict(threading.Lock)
        # random start so a restarted client never collides with cached replies
        self._ids = itertools.count(random.SystemRandom().getrandbits(40) + 1)
        self._id_lock = threading.Lock()

    def learn(self, addresses: dict[str, str]) -> None:
        self.addresses.update(addresses)

    def _connection(self, dest: str):
        conn = self._conns.get(dest)
        if conn is None:
            if dest not in self.addresses:
                raise TransportError(f"no address known for {dest!r}")
            sock = socket.create_connection(parse_address(self.addresses[dest]), timeout=self.timeout)
            conn = (sock, sock.makefile("rb"))
            self._conns[dest] = conn
        return conn

    def _drop(self, dest: str) -> None:
        conn = self._conns.pop(dest, None)
        if conn is not None:
            try:
                conn[1].close()
                conn[0].close()
            except OSError:
                pass

    def request(self, dest: str, msg: Message) -> Message:
        with self._locks[dest]:
            for attempt in (1, 2):
                try:
                    sock, stream = self._connection(dest)
                    sock.sendall(encode(msg))
                    frame = read_frame(stream)
                    if frame is None:
                        raise ConnectionError("connection closed")
                    return decode(frame)
                except (OSError, ConnectionError) as exc:
                    self._drop(dest)
                    if attempt == 2:
                        raise TransportError(f"{dest}: {exc}") from None
        raise AssertionError("unreachable")

    def call(self, dest: str, kind: str, body: dict) -> dict:
        with self._id_lock:
            mid = next(self._ids)
        return raise_for_reply(self.request(dest, Message(kind, mid, self.name, body)))

    def send(self, dest: str, kind: str, body: dict, on_reply=None) -> None:
        with self._id_lock:
            mid = next(self._ids)
        reply = self.request(dest, Message(kind, mid, self.name, body))
        if on_reply is not None:
            on_reply(reply)

    def close(self) -> None:
        for dest in list(self._conns):
            self._drop(dest)
