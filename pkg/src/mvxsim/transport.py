'''
Wire format, communication buffers, and the two channel flavors.

Monitor traffic never rides the intercepted syscall path; it moves through
per-variant communication buffers drained by connector pump threads onto a
channel.  The channel is either simulated (in-memory queues, still carrying
encoded frames) or real TCP over loopback.  All latency math lives in
simulated time carried inside message payloads, so both flavors produce
identical timing and the simulated flavor is bit-deterministic.

Frame layout, little endian:

    u32 length    # of everything after this field
    u8  msg_type
    u16 variant_id
    u64 seq_no
    ... payload (canonical JSON)
'''

from __future__ import annotations

import json
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional


class TransportClosed(Exception):
    """A lane or link was torn down while a peer was still using it."""


class MsgType(IntEnum):
    ARG_BROADCAST = 1
    RESULT_REPLICATION = 2
    LOCKSTEP_SUBMIT = 3
    LOCKSTEP_RELEASE = 4
    MISPREDICT_NOTICE = 5
    TERMINATE = 6


_HEADER = struct.Struct("<IBHQ")
_FIXED = 1 + 2 + 8  # type + variant + seq, counted inside the length field


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    variant_id: int
    seq_no: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return _HEADER.pack(_FIXED + len(self.payload), self.msg_type,
                            self.variant_id, self.seq_no) + self.payload

    @classmethod
    def decode(cls, buf: bytes) -> "tuple[Optional[WireMessage], bytes]":
        """Decode one frame, returning (message, remainder).

        Returns (None, buf) while the buffer holds less than one frame.
        """
        if len(buf) < _HEADER.size:
            return None, buf
        length, mt, variant, seq = _HEADER.unpack_from(buf)
        if length < _FIXED:
            raise ValueError(f"frame length {length} below fixed header size")
        end = 4 + length
        if len(buf) < end:
            return None, buf
        payload = buf[_HEADER.size:end]
        return cls(MsgType(mt), variant, seq, bytes(payload)), buf[end:]


def pack_payload(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def unpack_payload(msg: WireMessage) -> dict:
    if not msg.payload:
        return {}
    return json.loads(msg.payload.decode())


LANE_EOF = object()


class Fifo:
    """Bounded FIFO with blocking push/pop and accounting counters.

    stalls counts push attempts that found the lane full and had to wait;
    drained counts items discarded at teardown (abandoned lane or leftover
    at drain()).  Conservation: pushed == popped + drained on a clean run.
    """

    def __init__(self, capacity: int, name: str = "", stop: Optional[threading.Event] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.name = name
        self._stop = stop
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._abandoned = False
        self.pushed = 0
        self.popped = 0
        self.drained = 0
        self.stalls = 0

    def push(self, item) -> None:
        with self._cond:
            if self._closed:
                raise TransportClosed(f"push on closed lane {self.name}")
            waited = False
            while len(self._items) >= self.capacity and not self._abandoned:
                if self._stop is not None and self._stop.is_set():
                    raise TransportClosed(f"stopped while pushing to {self.name}")
                if not waited:
                    self.stalls += 1
                    waited = True
                self._cond.wait(timeout=0.05)
            self.pushed += 1
            if self._abandoned:
                self.drained += 1
                return
            self._items.append(item)
            self._cond.notify_all()

    def pop(self):
        with self._cond:
            while not self._items:
                if self._closed or self._abandoned:
                    return LANE_EOF
                if self._stop is not None and self._stop.is_set():
                    raise TransportClosed(f"stopped while popping from {self.name}")
                self._cond.wait(timeout=0.05)
            item = self._items.popleft()
            self.popped += 1
            self._cond.notify_all()
            return item

    def close(self) -> None:
        # Producer is done; poppers drain what is left and then see EOF.
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def abandon(self) -> None:
        # Consumer is gone; unblock producers and discard the backlog.
        with self._cond:
            self._abandoned = True
            self.drained += len(self._items)
            self._items.clear()
            self._cond.notify_all()

    def drain(self) -> list:
        with self._cond:
            left = list(self._items)
            self._items.clear()
            self.drained += len(left)
            return left

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


class CommBuffer:
    """Per-variant monitor mailbox: one outgoing lane, one incoming lane."""

    DEFAULT_CAPACITY = 64

    def __init__(self, variant_id: int, capacity: int = DEFAULT_CAPACITY,
                 stop: Optional[threading.Event] = None):
        self.variant_id = variant_id
        self.outgoing = Fifo(capacity, f"v{variant_id}.out", stop)
        self.incoming = Fifo(capacity, f"v{variant_id}.in", stop)


# -- channel links ----------------------------------------------------------


class AsyncLink:
    def send(self, msg: WireMessage) -> None:
        raise NotImplementedError

    def recv(self) -> Optional[WireMessage]:
        """Blocking receive; None means the peer closed the link."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class SimAsyncLink(AsyncLink):
    """In-memory link that still round-trips the wire encoding."""

    def __init__(self, name: str, channel: "SimChannel", stop: threading.Event):
        self.name = name
        self.channel = channel
        self._frames = Fifo(1 << 16, name, stop)
        self.trace: list = []  # encoded frames, for determinism checks

    def send(self, msg: WireMessage) -> None:
        frame = msg.encode()
        self.trace.append(frame)
        self.channel.count_message(len(frame))
        self._frames.push(frame)

    def recv(self) -> Optional[WireMessage]:
        frame = self._frames.pop()
        if frame is LANE_EOF:
            return None
        msg, rest = WireMessage.decode(frame)
        if msg is None or rest:
            raise ValueError("sim link carried a malformed frame")
        return msg

    def close(self) -> None:
        self._frames.close()


class TcpAsyncLink(AsyncLink):
    def __init__(self, sock: socket.socket, channel):
        self.sock = sock
        self.channel = channel
        self._buf = b""
        self._send_lock = threading.Lock()

    def send(self, msg: WireMessage) -> None:
        frame = msg.encode()
        self.channel.count_message(len(frame))
        with self._send_lock:
            self.sock.sendall(frame)

    def recv(self) -> Optional[WireMessage]:
        while True:
            msg, self._buf = WireMessage.decode(self._buf)
            if msg is not None:
                return msg
            try:
                chunk = self.sock.recv(65536)
            except OSError:
                return None
            if not chunk:
                return None
            self._buf += chunk

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class SyncLink:
    def roundtrip(self, msg: WireMessage) -> WireMessage:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SimSyncLink(SyncLink):
    """Direct call into the lockstep endpoint; blocking, like a real RPC."""

    def __init__(self, handler: Callable, channel: "SimChannel"):
        self.handler = handler
        self.channel = channel

    def roundtrip(self, msg: WireMessage) -> WireMessage:
        self.channel.count_roundtrip(len(msg.payload))
        return self.handler(msg)


class TcpSyncLink(SyncLink):
    def __init__(self, sock: socket.socket, channel):
        self.sock = sock
        self.channel = channel
        self._buf = b""
        self._lock = threading.Lock()

    def roundtrip(self, msg: WireMessage) -> WireMessage:
        with self._lock:
            self.channel.count_roundtrip(len(msg.payload))
            self.sock.sendall(msg.encode())
            while True:
                reply, self._buf = WireMessage.decode(self._buf)
                if reply is not None:
                    return reply
                chunk = self.sock.recv(65536)
                if not chunk:
                    raise TransportClosed("sync link closed mid round trip")
                self._buf += chunk

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# -- channels ----------------------------------------------------------------


class ChannelCounters:
    def __init__(self):
        self.messages = 0
        self.bytes = 0
        self.roundtrips = 0
        self._lock = threading.Lock()

    def snapshot(self) -> dict:
        with self._lock:
            return {"messages": self.messages, "bytes": self.bytes,
                    "roundtrips": self.roundtrips}


class SimChannel:
    """Pairs of in-memory links, one async + one sync per follower."""

    flavor = "sim"

    def __init__(self, latency_us: float, stop: threading.Event):
        self.latency_us = latency_us
        self.stop = stop
        self.counters = ChannelCounters()
        self._links: dict = {}

    def count_message(self, nbytes: int) -> None:
        with self.counters._lock:
            self.counters.messages += 1
            self.counters.bytes += nbytes

    def count_roundtrip(self, nbytes: int) -> None:
        with self.counters._lock:
            self.counters.roundtrips += 1
            self.counters.bytes += nbytes

    def async_pair(self, follower_id: int) -> "tuple[AsyncLink, AsyncLink]":
        """(leader-side send link, follower-side send link); each end recvs
        from the other's queue."""
        down = SimAsyncLink(f"down.{follower_id}", self, self.stop)
        up = SimAsyncLink(f"up.{follower_id}", self, self.stop)
        self._links[follower_id] = (down, up)
        return _HalfDuplex(down, up), _HalfDuplex(up, down)

    def sync_link(self, follower_id: int, handler: Callable) -> SyncLink:
        return SimSyncLink(handler, self)

    def send_traces(self) -> dict:
        return {fid: (list(d.trace), list(u.trace))
                for fid, (d, u) in self._links.items()}

    def close(self) -> None:
        for down, up in self._links.values():
            down.close()
            up.close()


class _HalfDuplex(AsyncLink):
    """Send on one sim queue, receive from the opposite one."""

    def __init__(self, tx: SimAsyncLink, rx: SimAsyncLink):
        self._tx = tx
        self._rx = rx

    def send(self, msg: WireMessage) -> None:
        self._tx.send(msg)

    def recv(self) -> Optional[WireMessage]:
        return self._rx.recv()

    def close(self) -> None:
        self._tx.close()
        self._rx.close()


# Connection preamble: one byte for lane kind, one for the follower id.
_PREAMBLE_ASYNC = 0x41  # 'A'
_PREAMBLE_SYNC = 0x53   # 'S'


class TcpChannel:
    """Real loopback sockets with the same framing and timing payloads.

    The leader side listens; each follower dials two connections, one per
    lane kind.  Latency still comes from the cost model via payload
    timestamps, not from the wall clock, so results match the sim flavor.
    """

    flavor = "tcp"

    def __init__(self, port: int, latency_us: float, n_followers: int):
        self.latency_us = latency_us
        self.n_followers = n_followers
        self.counters = ChannelCounters()
        self._server = socket.create_server(("127.0.0.1", port))
        self.port = self._server.getsockname()[1]
        self._accepted: dict = {}
        self._accept_done = threading.Event()
        self._accept_error: Optional[BaseException] = None
        self._service_threads: list = []
        self._thread = threading.Thread(target=self._accept_loop,
                                        name="tcp-accept", daemon=True)
        self._thread.start()

    def count_message(self, nbytes: int) -> None:
        with self.counters._lock:
            self.counters.messages += 1
            self.counters.bytes += nbytes

    def count_roundtrip(self, nbytes: int) -> None:
        with self.counters._lock:
            self.counters.roundtrips += 1
            self.counters.bytes += nbytes

    def _accept_loop(self) -> None:
        try:
            need = self.n_followers * 2
            self._server.settimeout(10.0)
            while len(self._accepted) < need:
                conn, _ = self._server.accept()
                tag = b""
                while len(tag) < 2:
                    got = conn.recv(2 - len(tag))
                    if not got:
                        break
                    tag += got
                if len(tag) != 2:
                    conn.close()
                    continue
                self._accepted[(tag[0], tag[1])] = conn
            self._accept_done.set()
        except BaseException as exc:  # surfaced to the runner at wait time
            self._accept_error = exc
            self._accept_done.set()

    def leader_async_link(self, follower_id: int) -> AsyncLink:
        self._wait_accepted()
        return TcpAsyncLink(self._accepted[(_PREAMBLE_ASYNC, follower_id)], self)

    def start_sync_service(self, follower_id: int, handler: Callable) -> None:
        """Service thread answering one follower's lockstep round trips."""
        self._wait_accepted()
        sock = self._accepted[(_PREAMBLE_SYNC, follower_id)]

        def serve():
            buf = b""
            while True:
                msg, buf = WireMessage.decode(buf)
                if msg is not None:
                    try:
                        reply = handler(msg)
                    except TransportClosed:
                        return
                    try:
                        sock.sendall(reply.encode())
                    except OSError:
                        return
                    continue
                try:
                    chunk = sock.recv(65536)
                except OSError:
                    return
                if not chunk:
                    return
                buf += chunk

        t = threading.Thread(target=serve, name=f"sync-serve-{follower_id}", daemon=True)
        t.start()
        self._service_threads.append(t)

    def follower_links(self, follower_id: int) -> "tuple[AsyncLink, SyncLink]":
        # The connect timeout must not linger: idle async lanes and long
        # lockstep rounds are both legitimate, so the sockets go fully
        # blocking once paired.  close() unblocks them at shutdown.
        a = socket.create_connection(("127.0.0.1", self.port), timeout=10.0)
        a.sendall(bytes([_PREAMBLE_ASYNC, follower_id]))
        a.settimeout(None)
        s = socket.create_connection(("127.0.0.1", self.port), timeout=10.0)
        s.sendall(bytes([_PREAMBLE_SYNC, follower_id]))
        s.settimeout(None)
        return TcpAsyncLink(a, self), TcpSyncLink(s, self)

    def _wait_accepted(self) -> None:
        if not self._accept_done.wait(timeout=10.0):
            raise TransportClosed("tcp channel setup timed out")
        if self._accept_error is not None:
            raise TransportClosed(f"tcp channel setup failed: {self._accept_error}")

    def close(self) -> None:
        for conn in self._accepted.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._server.close()
        for t in self._service_threads:
            t.join(timeout=2.0)


# -- connector ---------------------------------------------------------------


class Connector:
    """Pump threads moving frames between a comm buffer and channel links.

    The leader connector fans outgoing messages to every follower and feeds
    follower-origin control traffic (notices, terminate) to a sink instead
    of the data lane, so the in-process monitor's expected-message stream
    stays pure.
    """

    def __init__(self, variant_id: int, role: str, cb: CommBuffer):
        self.variant_id = variant_id
        self.role = role
        self.cb = cb
        self.forwarded = 0
        self.delivered = 0
        self._threads: list = []

    def start_leader(self, links: dict, control_sink: Callable) -> None:
        def out_pump():
            try:
                while True:
                    item = self.cb.outgoing.pop()
                    if item is LANE_EOF:
                        break
                    for link in links.values():
                        link.send(item)
                    self.forwarded += 1
            except TransportClosed:
                pass
            for link in links.values():
                link.close()

        def in_pump(link):
            try:
                while True:
                    msg = link.recv()
                    if msg is None:
                        break
                    self.delivered += 1
                    if msg.msg_type in (MsgType.MISPREDICT_NOTICE,
                                        MsgType.TERMINATE):
                        control_sink(msg)
                    else:
                        self.cb.incoming.push(msg)
            except TransportClosed:
                pass

        self._spawn(out_pump, "connector-out-leader")
        for fid, link in links.items():
            self._spawn(lambda lk=link: in_pump(lk), f"connector-in-leader-{fid}")

    def start_follower(self, link: AsyncLink) -> None:
        def out_pump():
            try:
                while True:
                    item = self.cb.outgoing.pop()
                    if item is LANE_EOF:
                        break
                    link.send(item)
                    self.forwarded += 1
            except TransportClosed:
                pass

        def in_pump():
            try:
                while True:
                    msg = link.recv()
                    if msg is None:
                        break
                    self.delivered += 1
                    self.cb.incoming.push(msg)
            except TransportClosed:
                pass
            self.cb.incoming.close()

        self._spawn(out_pump, f"connector-out-{self.variant_id}")
        self._spawn(in_pump, f"connector-in-{self.variant_id}")

    def _spawn(self, fn: Callable, name: str) -> None:
        t = threading.Thread(target=fn, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def join(self, timeout: float = 5.0) -> None:
        for t in self._threads:
            t.join(timeout=timeout)
