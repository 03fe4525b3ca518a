'''
Workload scripts and their expansion into per-variant call streams.

A script is line oriented:

    # comment
    call open path=/app/data/x flags=create
    loop 100
      call read fd=3 len=32
    end

Loops expand eagerly, nesting allowed.  Every variant of a run executes the
same script; divergence enters only through attack mutations, which edit
one variant's expanded stream at a chosen position.  Streams are always
renumbered gap-free from zero after mutation.
'''

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from typing import Optional

from .syscalls import NormalizedArgs, SyscallEvent, SyscallKind, normalize


class ScenarioFormatError(ValueError):
    """Malformed workload, scenario, or attack text."""


@dataclass(frozen=True)
class Directive:
    kind: SyscallKind
    kwargs: dict = field(default_factory=dict)
    line_no: int = 0


def parse_workload(text: str) -> list:
    """Parse and fully expand a workload script into a directive list."""
    program: list = []
    stack: list = []  # (loop_count, start_index, line_no)
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            parts = shlex.split(line)
        except ValueError as exc:
            raise ScenarioFormatError(f"line {line_no}: {exc}") from None
        head = parts[0]
        if head == "call":
            if len(parts) < 2:
                raise ScenarioFormatError(f"line {line_no}: call needs a syscall kind")
            try:
                kind = SyscallKind(parts[1])
            except ValueError:
                raise ScenarioFormatError(
                    f"line {line_no}: unknown syscall kind {parts[1]!r}") from None
            kwargs = {}
            for tok in parts[2:]:
                if "=" not in tok:
                    raise ScenarioFormatError(
                        f"line {line_no}: expected key=value, got {tok!r}")
                key, value = tok.split("=", 1)
                kwargs[key] = _coerce(value)
            program.append(Directive(kind, kwargs, line_no))
        elif head == "loop":
            if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) < 1:
                raise ScenarioFormatError(f"line {line_no}: loop needs a positive count")
            stack.append((int(parts[1]), len(program), line_no))
        elif head == "end":
            if not stack:
                raise ScenarioFormatError(f"line {line_no}: end without loop")
            count, start, _ = stack.pop()
            body = program[start:]
            for _ in range(count - 1):
                program.extend(body)
        else:
            raise ScenarioFormatError(f"line {line_no}: unknown directive {head!r}")
    if stack:
        raise ScenarioFormatError(f"line {stack[-1][2]}: loop without end")
    for directive in program:
        directive_args(directive)  # fail at load time, with the line number
    return program


def _coerce(value: str):
    try:
        return int(value)
    except ValueError:
        return value


# -- attack mutations ------------------------------------------------------

ATTACK_OPS = ("extra", "perturb", "skip", "token-tamper", "token-replay")


@dataclass(frozen=True)
class AttackSpec:
    """One mutation applied to one variant's expanded stream.

    Text forms (position is an index into the expanded directive list):

        extra:<kind>@<variant>:<pos>
        perturb:<field>:<delta>@<variant>:<pos>
        skip@<variant>:<pos>
        token-tamper@<variant>:<pos>
        token-replay@<variant>:<pos>
    """

    op: str
    variant_id: int
    position: int
    kind: Optional[SyscallKind] = None
    tfield: Optional[str] = None
    delta: Optional[str] = None

    @property
    def is_token_attack(self) -> bool:
        return self.op in ("token-tamper", "token-replay")


def parse_attack(text: str) -> AttackSpec:
    body, sep, where = text.partition("@")
    if not sep:
        raise ScenarioFormatError(f"attack spec {text!r} needs @variant:pos")
    v, sep, p = where.partition(":")
    if not sep or not v.isdigit() or not p.isdigit():
        raise ScenarioFormatError(f"attack spec {text!r}: bad @variant:pos")
    parts = body.split(":")
    op = parts[0]
    if op == "extra" and len(parts) == 2:
        try:
            kind = SyscallKind(parts[1])
        except ValueError:
            raise ScenarioFormatError(f"attack spec: unknown kind {parts[1]!r}") from None
        return AttackSpec("extra", int(v), int(p), kind=kind)
    if op == "perturb" and len(parts) == 3:
        return AttackSpec("perturb", int(v), int(p), tfield=parts[1], delta=parts[2])
    if op in ("skip", "token-tamper", "token-replay") and len(parts) == 1:
        return AttackSpec(op, int(v), int(p))
    raise ScenarioFormatError(f"attack spec {text!r}: unknown form")


# Argument fillers for injected calls.  Values are intentionally plain; the
# interesting part is that the call appears at all.
_EXTRA_ARGS = {
    SyscallKind.OPEN: {"path": "/tmp/injected", "flags": "create"},
    SyscallKind.CLOSE: {"fd": 0},
    SyscallKind.READ: {"fd": 0, "len": 1},
    SyscallKind.WRITE: {"fd": 1, "data": "x"},
    SyscallKind.GETCWD: {},
    SyscallKind.BRK: {"inc": 1},
    SyscallKind.MMAP: {"len": 4096},
    SyscallKind.MPROTECT: {"region": 1, "prot": "r,w,x"},
    SyscallKind.SETSOCKOPT: {"fd": 0, "level": "sol_socket", "opt": "reuseaddr", "value": 1},
    SyscallKind.SOCKET: {},
    SyscallKind.BIND: {"fd": 0, "addr": "private:1"},
    SyscallKind.LISTEN: {"fd": 0},
    SyscallKind.ACCEPT: {"fd": 0},
    SyscallKind.CONNECT: {"fd": 0, "addr": "private:1"},
    SyscallKind.SEND: {"fd": 0, "data": "x"},
    SyscallKind.RECV: {"fd": 0, "len": 1},
    SyscallKind.STAT: {"path": "/tmp"},
    SyscallKind.LSEEK: {"fd": 0, "pos": 0},
    SyscallKind.EXIT: {"code": 1},
}


def mutate(program: list, attack: Optional[AttackSpec], variant_id: int) -> list:
    """Return the stream one variant actually runs."""
    if attack is None or attack.variant_id != variant_id or attack.is_token_attack:
        return list(program)
    out = list(program)
    pos = attack.position
    if pos > len(out) or (attack.op != "extra" and pos >= len(out)):
        raise ScenarioFormatError(
            f"attack position {pos} out of range for {len(out)} directives")
    if attack.op == "extra":
        out.insert(pos, Directive(attack.kind, dict(_EXTRA_ARGS[attack.kind]), 0))
    elif attack.op == "skip":
        del out[pos]
    elif attack.op == "perturb":
        d = out[pos]
        kwargs = dict(d.kwargs)
        if attack.tfield not in kwargs:
            raise ScenarioFormatError(
                f"perturb field {attack.tfield!r} absent at position {pos}")
        old = kwargs[attack.tfield]
        if isinstance(old, int):
            kwargs[attack.tfield] = old + int(attack.delta)
        else:
            kwargs[attack.tfield] = f"{old}-{attack.delta}"
        out[pos] = Directive(d.kind, kwargs, d.line_no)
    return out


# -- event construction ----------------------------------------------------

_REQUIRED = {
    SyscallKind.OPEN: ("path",),
    SyscallKind.CLOSE: ("fd",),
    SyscallKind.READ: ("fd", "len"),
    SyscallKind.WRITE: ("fd", "data"),
    SyscallKind.GETCWD: (),
    SyscallKind.BRK: ("inc",),
    SyscallKind.MMAP: ("len",),
    SyscallKind.MPROTECT: ("region",),
    SyscallKind.SETSOCKOPT: ("fd", "level", "opt", "value"),
    SyscallKind.SOCKET: (),
    SyscallKind.BIND: ("fd", "addr"),
    SyscallKind.LISTEN: ("fd",),
    SyscallKind.ACCEPT: ("fd",),
    SyscallKind.CONNECT: ("fd", "addr"),
    SyscallKind.SEND: ("fd", "data"),
    SyscallKind.RECV: ("fd", "len"),
    SyscallKind.STAT: ("path",),
    SyscallKind.LSEEK: ("fd", "pos"),
    SyscallKind.EXIT: (),
}

_OPTIONAL = {
    SyscallKind.OPEN: ("flags",),
    SyscallKind.MPROTECT: ("prot",),
    SyscallKind.EXIT: ("code",),
}


def directive_args(directive: Directive) -> NormalizedArgs:
    kind = directive.kind
    kwargs = directive.kwargs
    allowed = set(_REQUIRED[kind]) | set(_OPTIONAL.get(kind, ()))
    for key in kwargs:
        if key not in allowed:
            raise ScenarioFormatError(
                f"line {directive.line_no}: {kind.value} does not take {key!r}")
    for key in _REQUIRED[kind]:
        if key not in kwargs:
            raise ScenarioFormatError(
                f"line {directive.line_no}: {kind.value} requires {key!r}")
    k = kind
    if k is SyscallKind.OPEN:
        flags = str(kwargs.get("flags", ""))
        return normalize(k, path=str(kwargs["path"]),
                         flags=[f for f in flags.split(",") if f])
    if k is SyscallKind.CLOSE:
        return normalize(k, fd=kwargs["fd"])
    if k in (SyscallKind.READ, SyscallKind.RECV):
        return normalize(k, fd=kwargs["fd"], numbers=(kwargs["len"],))
    if k in (SyscallKind.WRITE, SyscallKind.SEND):
        return normalize(k, fd=kwargs["fd"], data=str(kwargs["data"]).encode())
    if k is SyscallKind.GETCWD or k is SyscallKind.SOCKET:
        return normalize(k)
    if k is SyscallKind.BRK:
        return normalize(k, numbers=(kwargs["inc"],))
    if k is SyscallKind.MMAP:
        return normalize(k, numbers=(kwargs["len"],))
    if k is SyscallKind.MPROTECT:
        prot = str(kwargs.get("prot", "r"))
        return normalize(k, numbers=(kwargs["region"],),
                         flags=[f for f in prot.split(",") if f])
    if k is SyscallKind.SETSOCKOPT:
        return normalize(k, fd=kwargs["fd"],
                         symbols=(str(kwargs["level"]), str(kwargs["opt"])),
                         numbers=(kwargs["value"],))
    if k in (SyscallKind.BIND, SyscallKind.CONNECT):
        return normalize(k, fd=kwargs["fd"], symbols=(str(kwargs["addr"]),))
    if k in (SyscallKind.LISTEN, SyscallKind.ACCEPT):
        return normalize(k, fd=kwargs["fd"])
    if k is SyscallKind.STAT:
        return normalize(k, path=str(kwargs["path"]))
    if k is SyscallKind.LSEEK:
        return normalize(k, fd=kwargs["fd"], numbers=(kwargs["pos"],))
    if k is SyscallKind.EXIT:
        return normalize(k, numbers=(kwargs.get("code", 0),))
    raise ScenarioFormatError(f"unhandled kind {kind}")  # pragma: no cover


class VariantProgram:
    """The expanded, possibly mutated, renumbered stream of one variant."""

    def __init__(self, program: list, variant_id: int,
                 attack: Optional[AttackSpec] = None):
        self.variant_id = variant_id
        self.directives = mutate(program, attack, variant_id)
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.directives)

    def next_event(self) -> Optional[SyscallEvent]:
        if self.cursor >= len(self.directives):
            return None
        d = self.directives[self.cursor]
        event = SyscallEvent(
            variant_id=self.variant_id,
            seq_no=self.cursor,
            kind=d.kind,
            args=directive_args(d),
        )
        self.cursor += 1
        return event
