'''
Per-variant emulated kernel.

Each variant owns a private kernel: a descriptor table, an in-memory file
tree, a socket space fed by a deterministic traffic model, and trivial
memory bookkeeping.  Descriptor allocation follows the real contract: the
smallest free non-negative integer, with 0..2 taken at start.

The kernel knows nothing about monitoring.  Callers decide whether a result
is executed locally or applied from a replicated copy; apply_replicated()
only keeps the local table aligned with what the leader did.
'''

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .syscalls import SyscallEvent, SyscallKind

# setsockopt options this kernel accepts.  filemap keeps its own copy of
# this table on purpose: prediction must not peek at kernel internals, and
# the two tables drifting apart is exactly the bug the misprediction path
# exists to catch.
KERNEL_SUPPORTED_SOCKOPTS = frozenset({
    ("sol_socket", "reuseaddr"),
    ("sol_socket", "rcvbuf"),
    ("sol_socket", "sndbuf"),
    ("tcp", "nodelay"),
})


class Errno(str, Enum):
    EBADF = "EBADF"
    ENOENT = "ENOENT"
    ENOTSOCK = "ENOTSOCK"
    ENOPROTOOPT = "ENOPROTOOPT"
    EINVAL = "EINVAL"
    ENOTCONN = "ENOTCONN"
    EIO = "EIO"


class ReplicationMismatch(Exception):
    """A replicated result cannot be applied to the local table."""


@dataclass
class SyscallResult:
    value: int
    errno: Optional[Errno] = None
    payload: bytes = b""

    @property
    def ok(self) -> bool:
        return self.errno is None

    def to_wire(self) -> dict:
        d: dict = {"value": self.value}
        if self.errno is not None:
            d["errno"] = self.errno.value
        if self.payload:
            d["payload"] = base64.b64encode(self.payload).decode("ascii")
        return d

    @classmethod
    def from_wire(cls, d: dict) -> "SyscallResult":
        return cls(
            value=d["value"],
            errno=Errno(d["errno"]) if "errno" in d else None,
            payload=base64.b64decode(d["payload"]) if "payload" in d else b"",
        )


@dataclass
class FileDesc:
    path: str
    flags: frozenset = frozenset()
    offset: int = 0


@dataclass
class PipeDesc:
    name: str


@dataclass
class SocketDesc:
    state: str = "created"  # created | bound | listening | connected
    iface: Optional[str] = None  # "public" | "private"
    addr: Optional[str] = None
    opts: dict = field(default_factory=dict)
    inbound: bytes = b""  # unread request bytes on a connected socket


@dataclass
class ShadowDesc:
    """Placeholder for a descriptor that really lives on the leader.

    Registered when a leader result is replicated so the local fd space
    stays aligned.  flavor mirrors the original descriptor category.
    """

    flavor: str  # "file" | "socket"
    path: Optional[str] = None
    iface: Optional[str] = None
    addr: Optional[str] = None
    state: str = "created"
    offset: int = 0
    opts: dict = field(default_factory=dict)


@dataclass
class FaultInjection:
    """Fail the nth upcoming execution of a kind with the given errno."""

    kind: SyscallKind
    errno: Errno
    nth: int = 1  # 1-based occurrence counter, counted per injection
    seen: int = 0
    once: bool = True
    spent: bool = False


@dataclass
class TrafficModel:
    """Deterministic inbound traffic: one request per accepted connection."""

    requests: tuple = ()
    served: int = 0

    def next_request(self) -> bytes:
        if self.served < len(self.requests):
            req = self.requests[self.served]
        else:
            req = b"req-%d" % self.served
        self.served += 1
        return req


class EmulatedKernel:
    def __init__(self, files: Optional[dict] = None, traffic: Optional[TrafficModel] = None,
                 cwd: str = "/app"):
        self.fd_table: dict = {
            0: PipeDesc("stdin"),
            1: PipeDesc("stdout"),
            2: PipeDesc("stderr"),
        }
        self.fs: dict = {}
        for path, data in (files or {}).items():
            self.fs[path] = bytearray(data if isinstance(data, (bytes, bytearray)) else str(data).encode())
        self.cwd = cwd
        self.brk_pos = 0x1000
        self.regions: list = []
        self.traffic = traffic or TrafficModel()
        self.external_io = 0  # real socket-world operations performed here
        self.executed = 0
        self.exited: Optional[int] = None
        self.faults: list = []
        self.write_log: list = []  # (path-or-addr, bytes) pairs, for assertions

    # -- descriptor bookkeeping ------------------------------------------

    def allocate_fd(self) -> int:
        fd = 0
        while fd in self.fd_table:
            fd += 1
        return fd

    def reserve_fd(self, fd: int, name: str = "reserved") -> None:
        # Test hook: occupy a descriptor to skew allocation on one variant.
        self.fd_table[fd] = PipeDesc(name)

    def inject_fault(self, kind: SyscallKind, errno: Errno, nth: int = 1, once: bool = True) -> None:
        self.faults.append(FaultInjection(kind=kind, errno=errno, nth=nth, once=once))

    def _check_fault(self, kind: SyscallKind) -> Optional[Errno]:
        for f in self.faults:
            if f.spent or f.kind is not kind:
                continue
            f.seen += 1
            if f.seen >= f.nth:
                if f.once:
                    f.spent = True
                return f.errno
        return None

    # -- execution --------------------------------------------------------

    def execute(self, event: SyscallEvent) -> SyscallResult:
        self.executed += 1
        fault = self._check_fault(event.kind)
        if fault is not None:
            return SyscallResult(-1, fault)
        handler = getattr(self, "_do_" + event.kind.value)
        return handler(event)

    def _do_open(self, ev: SyscallEvent) -> SyscallResult:
        path = ev.args.path
        if path not in self.fs:
            if "create" in ev.args.flags:
                self.fs[path] = bytearray()
            else:
                return SyscallResult(-1, Errno.ENOENT)
        fd = self.allocate_fd()
        self.fd_table[fd] = FileDesc(path=path, flags=ev.args.flags)
        return SyscallResult(fd)

    def _do_close(self, ev: SyscallEvent) -> SyscallResult:
        fd = ev.args.fd
        if fd not in self.fd_table:
            return SyscallResult(-1, Errno.EBADF)
        del self.fd_table[fd]
        return SyscallResult(0)

    def _do_read(self, ev: SyscallEvent) -> SyscallResult:
        return self._read_like(ev, require_socket=False)

    def _do_recv(self, ev: SyscallEvent) -> SyscallResult:
        return self._read_like(ev, require_socket=True)

    def _read_like(self, ev: SyscallEvent, require_socket: bool) -> SyscallResult:
        desc = self.fd_table.get(ev.args.fd)
        length = ev.args.numbers[0] if ev.args.numbers else 0
        if desc is None:
            return SyscallResult(-1, Errno.EBADF)
        if isinstance(desc, FileDesc):
            if require_socket:
                return SyscallResult(-1, Errno.ENOTSOCK)
            data = bytes(self.fs.get(desc.path, b"")[desc.offset:desc.offset + length])
            desc.offset += len(data)
            return SyscallResult(len(data), payload=data)
        if isinstance(desc, SocketDesc):
            if desc.state != "connected":
                return SyscallResult(-1, Errno.ENOTCONN)
            data, desc.inbound = desc.inbound[:length], desc.inbound[length:]
            self.external_io += 1
            return SyscallResult(len(data), payload=data)
        if isinstance(desc, PipeDesc):
            if require_socket:
                return SyscallResult(-1, Errno.ENOTSOCK)
            return SyscallResult(0)  # stdin: immediate EOF
        # ShadowDesc: the real object lives on the leader; executing here
        # would invent data.  Surfaced as EIO so a routing bug is loud.
        return SyscallResult(-1, Errno.EIO)

    def _do_write(self, ev: SyscallEvent) -> SyscallResult:
        return self._write_like(ev, require_socket=False)

    def _do_send(self, ev: SyscallEvent) -> SyscallResult:
        return self._write_like(ev, require_socket=True)

    def _write_like(self, ev: SyscallEvent, require_socket: bool) -> SyscallResult:
        desc = self.fd_table.get(ev.args.fd)
        length = ev.args.payload_len or 0
        if desc is None:
            return SyscallResult(-1, Errno.EBADF)
        if isinstance(desc, FileDesc):
            if require_socket:
                return SyscallResult(-1, Errno.ENOTSOCK)
            buf = self.fs.setdefault(desc.path, bytearray())
            end = desc.offset + length
            if len(buf) < end:
                buf.extend(b"\x00" * (end - len(buf)))
            # Content is modeled by the digest; store a deterministic stamp.
            stamp = (ev.args.payload_digest or 0).to_bytes(8, "little")
            for i in range(length):
                buf[desc.offset + i] = stamp[i % 8]
            desc.offset = end
            self.write_log.append((desc.path, length))
            return SyscallResult(length)
        if isinstance(desc, SocketDesc):
            if desc.state != "connected":
                return SyscallResult(-1, Errno.ENOTCONN)
            self.external_io += 1
            self.write_log.append((desc.addr or "socket", length))
            return SyscallResult(length)
        if isinstance(desc, PipeDesc):
            if require_socket:
                return SyscallResult(-1, Errno.ENOTSOCK)
            self.write_log.append((desc.name, length))
            return SyscallResult(length)
        return SyscallResult(-1, Errno.EIO)

    def _do_getcwd(self, ev: SyscallEvent) -> SyscallResult:
        data = self.cwd.encode()
        return SyscallResult(len(data), payload=data)

    def _do_brk(self, ev: SyscallEvent) -> SyscallResult:
        inc = ev.args.numbers[0] if ev.args.numbers else 0
        self.brk_pos += inc
        return SyscallResult(self.brk_pos)

    def _do_mmap(self, ev: SyscallEvent) -> SyscallResult:
        length = ev.args.numbers[0] if ev.args.numbers else 0
        self.regions.append(length)
        return SyscallResult(len(self.regions))  # 1-based region handle

    def _do_mprotect(self, ev: SyscallEvent) -> SyscallResult:
        region = ev.args.numbers[0] if ev.args.numbers else 0
        if not 1 <= region <= len(self.regions):
            return SyscallResult(-1, Errno.EINVAL)
        return SyscallResult(0)

    def _do_socket(self, ev: SyscallEvent) -> SyscallResult:
        fd = self.allocate_fd()
        self.fd_table[fd] = SocketDesc()
        return SyscallResult(fd)

    def _socket_for(self, fd: int):
        desc = self.fd_table.get(fd)
        if desc is None:
            return None, SyscallResult(-1, Errno.EBADF)
        if not isinstance(desc, SocketDesc):
            return None, SyscallResult(-1, Errno.ENOTSOCK)
        return desc, None

    @staticmethod
    def _parse_addr(addr: str):
        # Addresses look like "public:80" or "private:9090".
        iface, _, port = addr.partition(":")
        if iface not in ("public", "private") or not port.isdigit():
            return None
        return iface, port

    def _do_bind(self, ev: SyscallEvent) -> SyscallResult:
        desc, err = self._socket_for(ev.args.fd)
        if err:
            return err
        parsed = self._parse_addr(ev.args.symbols[0]) if ev.args.symbols else None
        if parsed is None or desc.state != "created":
            return SyscallResult(-1, Errno.EINVAL)
        desc.state = "bound"
        desc.iface, _ = parsed
        desc.addr = ev.args.symbols[0]
        self.external_io += 1
        return SyscallResult(0)

    def _do_listen(self, ev: SyscallEvent) -> SyscallResult:
        desc, err = self._socket_for(ev.args.fd)
        if err:
            return err
        if desc.state != "bound":
            return SyscallResult(-1, Errno.EINVAL)
        desc.state = "listening"
        self.external_io += 1
        return SyscallResult(0)

    def _do_accept(self, ev: SyscallEvent) -> SyscallResult:
        desc, err = self._socket_for(ev.args.fd)
        if err:
            return err
        if desc.state != "listening":
            return SyscallResult(-1, Errno.EINVAL)
        fd = self.allocate_fd()
        self.fd_table[fd] = SocketDesc(
            state="connected",
            iface=desc.iface,
            addr=desc.addr,
            inbound=self.traffic.next_request(),
        )
        self.external_io += 1
        return SyscallResult(fd)

    def _do_connect(self, ev: SyscallEvent) -> SyscallResult:
        desc, err = self._socket_for(ev.args.fd)
        if err:
            return err
        parsed = self._parse_addr(ev.args.symbols[0]) if ev.args.symbols else None
        if parsed is None or desc.state != "created":
            return SyscallResult(-1, Errno.EINVAL)
        desc.state = "connected"
        desc.iface, _ = parsed
        desc.addr = ev.args.symbols[0]
        desc.inbound = b""
        self.external_io += 1
        return SyscallResult(0)

    def _do_setsockopt(self, ev: SyscallEvent) -> SyscallResult:
        desc = self.fd_table.get(ev.args.fd)
        if desc is None:
            return SyscallResult(-1, Errno.EBADF)
        level, opt = (ev.args.symbols + ("", ""))[:2]
        if isinstance(desc, ShadowDesc):
            if desc.flavor != "socket":
                return SyscallResult(-1, Errno.ENOTSOCK)
            # Option bookkeeping is local even for shadow sockets; the
            # real kernel object is the leader's problem.
            if (level, opt) not in KERNEL_SUPPORTED_SOCKOPTS:
                return SyscallResult(-1, Errno.ENOPROTOOPT)
            desc.opts[(level, opt)] = ev.args.numbers[0] if ev.args.numbers else 0
            return SyscallResult(0)
        if not isinstance(desc, SocketDesc):
            return SyscallResult(-1, Errno.ENOTSOCK)
        if (level, opt) not in KERNEL_SUPPORTED_SOCKOPTS:
            return SyscallResult(-1, Errno.ENOPROTOOPT)
        desc.opts[(level, opt)] = ev.args.numbers[0] if ev.args.numbers else 0
        return SyscallResult(0)

    def _do_stat(self, ev: SyscallEvent) -> SyscallResult:
        path = ev.args.path
        if path not in self.fs:
            return SyscallResult(-1, Errno.ENOENT)
        return SyscallResult(len(self.fs[path]))

    def _do_lseek(self, ev: SyscallEvent) -> SyscallResult:
        desc = self.fd_table.get(ev.args.fd)
        pos = ev.args.numbers[0] if ev.args.numbers else 0
        if desc is None:
            return SyscallResult(-1, Errno.EBADF)
        if isinstance(desc, (FileDesc, ShadowDesc)):
            if isinstance(desc, ShadowDesc) and desc.flavor != "file":
                return SyscallResult(-1, Errno.EINVAL)
            desc.offset = pos
            return SyscallResult(pos)
        return SyscallResult(-1, Errno.EINVAL)

    def _do_exit(self, ev: SyscallEvent) -> SyscallResult:
        code = ev.args.numbers[0] if ev.args.numbers else 0
        self.exited = code
        return SyscallResult(code)


def apply_replicated(kernel: EmulatedKernel, event: SyscallEvent,
                     msg_kind: SyscallKind, result: SyscallResult) -> SyscallResult:
    """Apply a leader result on a follower kernel.

    No emulated work runs; only the descriptor table is kept aligned.
    A kind mismatch between the local event and the replicated record means
    the streams have skewed, which the caller escalates.
    """
    if msg_kind is not event.kind:
        raise ReplicationMismatch(
            f"replicated {msg_kind.value} against local {event.kind.value}")
    kernel.executed += 1
    if not result.ok:
        return result
    kind = event.kind
    if kind is SyscallKind.OPEN:
        _register_shadow(kernel, result.value, ShadowDesc(flavor="file", path=event.args.path))
    elif kind is SyscallKind.SOCKET:
        _register_shadow(kernel, result.value, ShadowDesc(flavor="socket"))
    elif kind is SyscallKind.ACCEPT:
        listener = kernel.fd_table.get(event.args.fd)
        iface = getattr(listener, "iface", None)
        addr = getattr(listener, "addr", None)
        _register_shadow(kernel, result.value, ShadowDesc(
            flavor="socket", state="connected", iface=iface, addr=addr))
    elif kind is SyscallKind.BIND:
        _shadow_socket_update(kernel, event, state="bound")
    elif kind is SyscallKind.LISTEN:
        _shadow_socket_update(kernel, event, state="listening")
    elif kind is SyscallKind.CONNECT:
        _shadow_socket_update(kernel, event, state="connected")
    elif kind in (SyscallKind.READ, SyscallKind.RECV):
        desc = kernel.fd_table.get(event.args.fd)
        if desc is not None and hasattr(desc, "offset"):
            desc.offset += len(result.payload)
    elif kind is SyscallKind.SETSOCKOPT:
        desc = kernel.fd_table.get(event.args.fd)
        if desc is not None and hasattr(desc, "opts"):
            level, opt = (event.args.symbols + ("", ""))[:2]
            desc.opts[(level, opt)] = event.args.numbers[0] if event.args.numbers else 0
    # write/send/stat leave no local residue beyond the result itself.
    return result


def _register_shadow(kernel: EmulatedKernel, fd: int, shadow: ShadowDesc) -> None:
    if fd in kernel.fd_table:
        raise ReplicationMismatch(f"replicated descriptor {fd} already occupied")
    if fd != kernel.allocate_fd():
        raise ReplicationMismatch(
            f"replicated descriptor {fd} skips free slot {kernel.allocate_fd()}")
    kernel.fd_table[fd] = shadow


def _shadow_socket_update(kernel: EmulatedKernel, event: SyscallEvent, state: str) -> None:
    desc = kernel.fd_table.get(event.args.fd)
    if desc is None:
        raise ReplicationMismatch(f"no local descriptor {event.args.fd} for {state}")
    if isinstance(desc, (SocketDesc, ShadowDesc)):
        desc.state = state
        if event.args.symbols:
            parsed = EmulatedKernel._parse_addr(event.args.symbols[0])
            if parsed:
                desc.iface = parsed[0]
                desc.addr = event.args.symbols[0]
