'''
System-call vocabulary, argument normalization, and the sensitivity policy.

The call set is a closed enumeration: unknown names in workloads or policy
files are configuration errors, never silently accepted.  Arguments are
reduced to a canonical, platform-free form before any cross-variant
comparison so that two healthy variants always produce byte-identical
normalized views.  Raw pointers and buffer addresses do not exist in this
vocabulary; payloads travel as (length, digest) pairs.
'''

from __future__ import annotations

import fnmatch
import posixpath
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional


class PolicyError(ValueError):
    """Raised for malformed sensitivity policy text."""


class SyscallKind(str, Enum):
    OPEN = "open"
    CLOSE = "close"
    READ = "read"
    WRITE = "write"
    GETCWD = "getcwd"
    BRK = "brk"
    MMAP = "mmap"
    MPROTECT = "mprotect"
    SETSOCKOPT = "setsockopt"
    SOCKET = "socket"
    BIND = "bind"
    LISTEN = "listen"
    ACCEPT = "accept"
    CONNECT = "connect"
    SEND = "send"
    RECV = "recv"
    STAT = "stat"
    LSEEK = "lseek"
    EXIT = "exit"

    @classmethod
    def parse(cls, name: str) -> "SyscallKind":
        try:
            return cls(name)
        except ValueError:
            raise PolicyError(f"unknown syscall kind {name!r}") from None


class Issuer(Enum):
    APPLICATION = "application"
    IN_PROCESS_MONITOR = "in-process-monitor"


class SensitivityClass(Enum):
    SENSITIVE = "sensitive"
    NON_SENSITIVE = "nonsensitive"


class FdKind(str, Enum):
    FILE = "file"
    PIPE = "pipe"
    PUBLIC_SOCKET = "public-socket"
    PRIVATE_SOCKET = "private-socket"
    NONE = "none"        # call carries no descriptor argument
    INVALID = "invalid"  # descriptor not present in the fd map

    @classmethod
    def parse(cls, name: str) -> "FdKind":
        try:
            return cls(name)
        except ValueError:
            raise PolicyError(f"unknown fd kind {name!r}") from None


SOCKET_FD_KINDS = frozenset({FdKind.PUBLIC_SOCKET, FdKind.PRIVATE_SOCKET})

# Kinds whose result is owned by the leader's execution and (absent a
# cheaper prediction) replicated to followers.
IO_RESULT_KINDS = frozenset({
    SyscallKind.OPEN,
    SyscallKind.READ,
    SyscallKind.WRITE,
    SyscallKind.SEND,
    SyscallKind.RECV,
    SyscallKind.SOCKET,
    SyscallKind.BIND,
    SyscallKind.LISTEN,
    SyscallKind.ACCEPT,
    SyscallKind.CONNECT,
    SyscallKind.SETSOCKOPT,
    SyscallKind.STAT,
})

# Kinds every variant always executes on its own kernel.  close is local by
# design: each side retires its own descriptor so the fd spaces stay aligned
# without a message.
LOCAL_KINDS = frozenset(SyscallKind) - IO_RESULT_KINDS

# Descriptor-bearing kinds; normalize() requires fd= for these.
FD_KINDS = frozenset({
    SyscallKind.CLOSE,
    SyscallKind.READ,
    SyscallKind.WRITE,
    SyscallKind.SEND,
    SyscallKind.RECV,
    SyscallKind.LSEEK,
    SyscallKind.SETSOCKOPT,
    SyscallKind.BIND,
    SyscallKind.LISTEN,
    SyscallKind.ACCEPT,
    SyscallKind.CONNECT,
})

PATH_KINDS = frozenset({SyscallKind.OPEN, SyscallKind.STAT})


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def digest64(data: bytes) -> int:
    """FNV-1a over the payload bytes.  Stable across runs and hosts."""
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def canonical_path(path: str) -> str:
    # Normalization must be idempotent; posixpath.normpath is.
    p = posixpath.normpath(path)
    return p


@dataclass(frozen=True)
class NormalizedArgs:
    """Canonical argument view used for all cross-variant comparisons."""

    path: Optional[str] = None
    fd: Optional[int] = None
    flags: frozenset = frozenset()
    payload_len: Optional[int] = None
    payload_digest: Optional[int] = None
    numbers: tuple = ()
    symbols: tuple = ()

    def to_wire(self) -> dict:
        d: dict = {}
        if self.path is not None:
            d["path"] = self.path
        if self.fd is not None:
            d["fd"] = self.fd
        if self.flags:
            d["flags"] = sorted(self.flags)
        if self.payload_len is not None:
            d["len"] = self.payload_len
        if self.payload_digest is not None:
            d["digest"] = self.payload_digest
        if self.numbers:
            d["numbers"] = list(self.numbers)
        if self.symbols:
            d["symbols"] = list(self.symbols)
        return d

    @classmethod
    def from_wire(cls, d: dict) -> "NormalizedArgs":
        return cls(
            path=d.get("path"),
            fd=d.get("fd"),
            flags=frozenset(d.get("flags", ())),
            payload_len=d.get("len"),
            payload_digest=d.get("digest"),
            numbers=tuple(d.get("numbers", ())),
            symbols=tuple(d.get("symbols", ())),
        )


def normalize(
    kind: SyscallKind,
    *,
    path: Optional[str] = None,
    fd: Optional[int] = None,
    flags: Iterable[str] = (),
    data: Optional[bytes] = None,
    payload_len: Optional[int] = None,
    payload_digest: Optional[int] = None,
    numbers: Iterable[int] = (),
    symbols: Iterable[str] = (),
) -> NormalizedArgs:
    """Build the canonical argument record for one call.

    Paths are canonicalized, flag sets are deduplicated and order-free,
    payload bytes collapse to (length, digest).  Passing a normalized
    record's own fields back in reproduces it exactly.
    """
    if kind in FD_KINDS and fd is None:
        raise ValueError(f"{kind.value} requires a descriptor argument")
    if kind in PATH_KINDS and path is None:
        raise ValueError(f"{kind.value} requires a path argument")
    if data is not None:
        if payload_len is not None or payload_digest is not None:
            raise ValueError("pass raw data or a (len, digest) pair, not both")
        payload_len = len(data)
        payload_digest = digest64(data)
    return NormalizedArgs(
        path=canonical_path(path) if path is not None else None,
        fd=fd,
        flags=frozenset(flags),
        payload_len=payload_len,
        payload_digest=payload_digest,
        numbers=tuple(int(n) for n in numbers),
        symbols=tuple(str(s) for s in symbols),
    )


@dataclass(frozen=True)
class SyscallEvent:
    """One intercepted call of one variant.

    seq_no is the variant-local issue index, gap-free from 0.  Events never
    carry routing tokens; tokens live only inside the arbiter and its Route
    values.
    """

    variant_id: int
    seq_no: int
    kind: SyscallKind
    args: NormalizedArgs
    issuer: Issuer = Issuer.APPLICATION

    def to_wire(self) -> dict:
        return {
            "variant": self.variant_id,
            "seq": self.seq_no,
            "kind": self.kind.value,
            "args": self.args.to_wire(),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "SyscallEvent":
        return cls(
            variant_id=d["variant"],
            seq_no=d["seq"],
            kind=SyscallKind(d["kind"]),
            args=NormalizedArgs.from_wire(d["args"]),
        )


@dataclass(frozen=True)
class PolicyRule:
    kind_glob: str
    fd_kind: Optional[FdKind]  # None means any
    sensitivity: SensitivityClass

    def matches(self, kind: SyscallKind, fd_kind: FdKind) -> bool:
        if not fnmatch.fnmatchcase(kind.value, self.kind_glob):
            return False
        return self.fd_kind is None or self.fd_kind is fd_kind


@dataclass
class SensitivityPolicy:
    """Ordered rule table; first match wins, always-monitored wins over all."""

    rules: tuple = ()
    always_monitored: frozenset = frozenset()
    default: SensitivityClass = SensitivityClass.NON_SENSITIVE

    def classify_kind(self, kind: SyscallKind, fd_kind: FdKind) -> SensitivityClass:
        if kind in self.always_monitored:
            return SensitivityClass.SENSITIVE
        if fd_kind is FdKind.INVALID:
            # Unknown descriptors get the conservative treatment.
            return SensitivityClass.SENSITIVE
        for rule in self.rules:
            if rule.matches(kind, fd_kind):
                return rule.sensitivity
        return self.default


def parse_policy(text: str) -> SensitivityPolicy:
    """Parse policy text.

    Grammar, one directive per line (# comments, blank lines ignored):

        @default <sensitive|nonsensitive>
        @always  <kind>
        <kind-glob> <fd-kind|*> <sensitive|nonsensitive>
    """
    rules = []
    always = set()
    default = SensitivityClass.NON_SENSITIVE
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "@default":
                if len(parts) != 2:
                    raise PolicyError("@default takes one argument")
                default = _parse_sensitivity(parts[1])
            elif parts[0] == "@always":
                if len(parts) != 2:
                    raise PolicyError("@always takes one argument")
                always.add(SyscallKind.parse(parts[1]))
            else:
                if len(parts) != 3:
                    raise PolicyError("rule needs <kind-glob> <fd-kind|*> <class>")
                glob, fk, sens = parts
                _validate_glob(glob)
                fd_kind = None if fk == "*" else FdKind.parse(fk)
                rules.append(PolicyRule(glob, fd_kind, _parse_sensitivity(sens)))
        except PolicyError as exc:
            raise PolicyError(f"line {lineno}: {exc}") from None
    return SensitivityPolicy(tuple(rules), frozenset(always), default)


def _parse_sensitivity(word: str) -> SensitivityClass:
    if word == "sensitive":
        return SensitivityClass.SENSITIVE
    if word == "nonsensitive":
        return SensitivityClass.NON_SENSITIVE
    raise PolicyError(f"unknown sensitivity {word!r}")


def _validate_glob(glob: str) -> None:
    # A glob must match at least one known kind, otherwise it is a typo.
    if not any(fnmatch.fnmatchcase(k.value, glob) for k in SyscallKind):
        raise PolicyError(f"kind glob {glob!r} matches no known syscall")


DEFAULT_POLICY_TEXT = """\
# Default sensitivity table.
#
# Socket lifecycle and anything touching a public-facing socket is
# sensitive; memory protection changes are always monitored; plain file
# and process-local calls run under the in-process monitor.
@default nonsensitive
@always mmap
@always mprotect
socket * sensitive
bind * sensitive
listen * sensitive
accept * sensitive
connect * sensitive
exit * sensitive
read public-socket sensitive
write public-socket sensitive
recv public-socket sensitive
send public-socket sensitive
setsockopt public-socket nonsensitive
"""

DEFAULT_POLICY = parse_policy(DEFAULT_POLICY_TEXT)


def classify(event: SyscallEvent, fd_map, policy: SensitivityPolicy) -> SensitivityClass:
    """Classify one application-issued event against the policy.

    fd_map only needs an fd_kind(fd) -> FdKind method.  Monitor-origin
    events never reach classification; that is enforced at the arbiter.
    """
    if event.issuer is not Issuer.APPLICATION:
        raise ValueError("monitor-origin events are not classified")
    if event.args.fd is None:
        fd_kind = FdKind.NONE
    else:
        fd_kind = fd_map.fd_kind(event.args.fd)
    return policy.classify_kind(event.kind, fd_kind)
