'''
Descriptor metadata and outcome prediction.

The file map mirrors what each variant believes about its descriptor space:
kind, origin (locally created vs registered from a replicated leader
result), path or address, and recorded socket options.  Selective
replication leans on it twice: predicting the descriptor an open-like call
must return (the smallest free non-negative integer, 0..2 preoccupied) and
predicting setsockopt outcomes from the option table without asking the
kernel.

The option table here is deliberately a separate copy from the kernel's;
prediction must answer from recorded metadata alone.
'''

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .kernel import SyscallResult, Errno
from .syscalls import FdKind, SOCKET_FD_KINDS, SyscallEvent, SyscallKind

FILEMAP_SUPPORTED_SOCKOPTS = frozenset({
    ("sol_socket", "reuseaddr"),
    ("sol_socket", "rcvbuf"),
    ("sol_socket", "sndbuf"),
    ("tcp", "nodelay"),
})


class Origin(Enum):
    LOCAL = "local"
    REPLICATED_SHADOW = "shadow"


@dataclass(frozen=True)
class FdMeta:
    fd: int
    kind: FdKind
    origin: Origin
    path: Optional[str] = None
    addr: Optional[str] = None
    opts: tuple = ()  # ((level, opt, value), ...) in application order


class FileMap:
    """Thread-compatible map with a version counter for snapshot reads."""

    def __init__(self):
        self._lock = threading.RLock()
        self._entries: dict = {}
        self.version = 0
        self.anomalies: list = []
        for fd in (0, 1, 2):
            self._entries[fd] = FdMeta(fd=fd, kind=FdKind.PIPE, origin=Origin.LOCAL,
                                       path=("stdin", "stdout", "stderr")[fd])

    def fd_kind(self, fd: int) -> FdKind:
        with self._lock:
            meta = self._entries.get(fd)
            return meta.kind if meta is not None else FdKind.INVALID

    def get(self, fd: int) -> Optional[FdMeta]:
        with self._lock:
            return self._entries.get(fd)

    def snapshot(self) -> dict:
        # Copy under the lock; the version pins which state was seen.
        with self._lock:
            return {"version": self.version, "entries": dict(self._entries)}

    def _mutate(self, fd: int, meta: Optional[FdMeta]) -> None:
        with self._lock:
            if meta is None:
                self._entries.pop(fd, None)
            else:
                self._entries[fd] = meta
            self.version += 1

    def record(self, event: SyscallEvent, result: SyscallResult,
               origin: Origin = Origin.LOCAL) -> None:
        """Fold one completed call into the map.

        Only descriptor-shaping kinds matter; everything else is a no-op so
        callers can record unconditionally.
        """
        if not result.ok:
            return
        kind = event.kind
        if kind is SyscallKind.OPEN:
            self._mutate(result.value, FdMeta(result.value, FdKind.FILE, origin,
                                              path=event.args.path))
        elif kind is SyscallKind.SOCKET:
            self._mutate(result.value, FdMeta(result.value, FdKind.PRIVATE_SOCKET,
                                              origin))
        elif kind is SyscallKind.ACCEPT:
            listener = self.get(event.args.fd)
            kind_out = listener.kind if listener is not None and listener.kind in \
                SOCKET_FD_KINDS else FdKind.PRIVATE_SOCKET
            addr = listener.addr if listener is not None else None
            self._mutate(result.value, FdMeta(result.value, kind_out, origin,
                                              addr=addr))
        elif kind in (SyscallKind.BIND, SyscallKind.CONNECT):
            meta = self.get(event.args.fd)
            if meta is None:
                self.anomalies.append(("bind-or-connect-unknown-fd", event.args.fd))
                return
            addr = event.args.symbols[0] if event.args.symbols else None
            iface = (addr or "").partition(":")[0]
            kind_out = FdKind.PUBLIC_SOCKET if iface == "public" else FdKind.PRIVATE_SOCKET
            self._mutate(event.args.fd, replace(meta, kind=kind_out, addr=addr))
        elif kind is SyscallKind.SETSOCKOPT:
            meta = self.get(event.args.fd)
            if meta is None:
                self.anomalies.append(("setsockopt-unknown-fd", event.args.fd))
                return
            level, opt = (event.args.symbols + ("", ""))[:2]
            value = event.args.numbers[0] if event.args.numbers else 0
            self._mutate(event.args.fd,
                         replace(meta, opts=meta.opts + ((level, opt, value),)))
        elif kind is SyscallKind.CLOSE:
            with self._lock:
                if event.args.fd not in self._entries:
                    self.anomalies.append(("double-close", event.args.fd))
                    return
            self._mutate(event.args.fd, None)

    # -- prediction --------------------------------------------------------

    def predict_next_fd(self) -> int:
        """The descriptor an open-like call must return: min free integer."""
        with self._lock:
            fd = 0
            while fd in self._entries:
                fd += 1
            return fd

    def predict_setsockopt(self, event: SyscallEvent) -> SyscallResult:
        """Predict a setsockopt outcome from recorded metadata alone."""
        meta = self.get(event.args.fd)
        if meta is None:
            return SyscallResult(-1, Errno.EBADF)
        if meta.kind not in SOCKET_FD_KINDS:
            return SyscallResult(-1, Errno.ENOTSOCK)
        level, opt = (event.args.symbols + ("", ""))[:2]
        if (level, opt) not in FILEMAP_SUPPORTED_SOCKOPTS:
            return SyscallResult(-1, Errno.ENOPROTOOPT)
        return SyscallResult(0)

    def dump(self) -> str:
        with self._lock:
            lines = []
            for fd in sorted(self._entries):
                m = self._entries[fd]
                what = m.path or m.addr or "-"
                opts = ",".join(f"{l}.{o}={v}" for l, o, v in m.opts) or "-"
                lines.append(f"{fd} {m.kind.value} {m.origin.value} {what} {opts}")
            return "\n".join(lines)

    def fds(self) -> list:
        with self._lock:
            return sorted(self._entries)
