'''
The syscall arbiter: interception, routing, and one-time restart tokens.

Every application call crosses into the arbiter exactly once.  Sensitive
calls route to the cross-process monitor; non-sensitive calls route to the
in-process monitor together with a freshly minted single-use token.  When
the in-process monitor restarts the call, the arbiter re-checks the token:
value, binding to (variant, seq), unspent state, and presenter identity.
Any failure is logged as a security event and the call is demoted to the
cross-process path, where a lone escalated call shows up as divergence.

Token values never appear on events, logs, or reports; they live only in
Route objects handed to the monitor.
'''

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .filemap import FileMap
from .lockstep import RunControl
from .metrics import VariantCounters
from .syscalls import (Issuer, SensitivityClass, SensitivityPolicy,
                       SyscallEvent, classify)


class TokenState(Enum):
    ISSUED = "issued"
    CONSUMED = "consumed"


@dataclass
class AuthToken:
    value: int
    variant_id: int
    seq_no: int
    state: TokenState = TokenState.ISSUED

    def forged_copy(self) -> "AuthToken":
        # Test/attack helper: same binding, perturbed secret.
        return AuthToken(self.value ^ 1, self.variant_id, self.seq_no, self.state)


class RouteTarget(Enum):
    IN_PROCESS = "in-process"
    CROSS_PROCESS = "cross-process"


@dataclass(frozen=True)
class Route:
    target: RouteTarget
    sensitivity: SensitivityClass
    token: Optional[AuthToken] = None

    def __repr__(self) -> str:  # tokens stay out of any printable surface
        return f"Route({self.target.value}, {self.sensitivity.value})"


class RestartOutcome(Enum):
    PERMIT = "permit"
    FORWARD = "forward"


class Arbiter:
    """Per-variant routing authority.  Runs on its variant's thread."""

    def __init__(self, variant_id: int, policy: SensitivityPolicy,
                 fmap: FileMap, selective: bool, seed: int,
                 counters: VariantCounters, control: RunControl):
        self.variant_id = variant_id
        self.policy = policy
        self.fmap = fmap
        self.selective = selective
        self.counters = counters
        self.control = control
        self._rng = random.Random((seed << 16) ^ 0x5EED ^ variant_id)
        self._tokens: dict = {}
        self.minted = 0
        self.permits = 0
        self.rejects = 0
        self.monitor_origin_intercepts = 0

    def intercept(self, event: SyscallEvent) -> Route:
        """Classify and route one application call."""
        if event.issuer is not Issuer.APPLICATION:
            # Monitor traffic must never reach interception; the comm
            # buffer and connector exist precisely so this cannot happen.
            self.monitor_origin_intercepts += 1
            raise AssertionError("monitor-origin event reached the arbiter")
        self.counters.crossings += 1
        sens = classify(event, self.fmap, self.policy)
        if sens is SensitivityClass.SENSITIVE:
            self.counters.sensitive += 1
        else:
            self.counters.nonsensitive += 1
        if not self.selective:
            # Full lockstep: everything is treated as cross-process work.
            return Route(RouteTarget.CROSS_PROCESS, sens)
        if sens is SensitivityClass.SENSITIVE:
            return Route(RouteTarget.CROSS_PROCESS, sens)
        token = AuthToken(self._rng.getrandbits(64), event.variant_id,
                          event.seq_no)
        self._tokens[(event.variant_id, event.seq_no)] = token
        self.minted += 1
        return Route(RouteTarget.IN_PROCESS, sens, token)

    def verify_restart(self, event: SyscallEvent, presented: Optional[AuthToken],
                       issuer: Issuer) -> RestartOutcome:
        """Re-admit a restarted call iff its one-time token checks out."""
        self.counters.crossings += 1
        issued = self._tokens.get((event.variant_id, event.seq_no))
        reason = None
        if issuer is not Issuer.IN_PROCESS_MONITOR:
            reason = "restart not presented by the in-process monitor"
        elif presented is None or issued is None:
            reason = "restart without an issued token"
        elif issued.state is TokenState.CONSUMED:
            reason = "token already consumed"
        elif presented.value != issued.value:
            reason = "token value mismatch"
        elif (presented.variant_id, presented.seq_no) != (event.variant_id,
                                                          event.seq_no):
            reason = "token bound to a different call"
        if reason is not None:
            self.rejects += 1
            self.control.add_security_event(event.variant_id, event.seq_no, reason)
            return RestartOutcome.FORWARD
        issued.state = TokenState.CONSUMED
        self.permits += 1
        return RestartOutcome.PERMIT

    def issued_token(self, variant_id: int, seq_no: int) -> Optional[AuthToken]:
        # Introspection for tests and token attacks.
        return self._tokens.get((variant_id, seq_no))
